//! The `.dpcf` feature container, record validation, MOS normalization and
//! the synthetic generator used for desk-scale training.
//!
//! Layout, all little-endian:
//!
//! ```text
//! header (40 bytes)
//!   magic         [u8; 8]   "DPCVQA01"
//!   version       u32       1
//!   K             u32       verbalizer count
//!   d_m           u32       visual token width
//!   d_a           u32       auxiliary token width
//!   record_count  u64
//!   mos_scale_lo  f32
//!   mos_scale_hi  f32
//! record (repeated record_count times)
//!   id_len        u32
//!   id            [u8; id_len]  UTF-8
//!   N             u32
//!   N_a           u32
//!   mos_raw       f32       NaN = unlabeled
//!   z             [f32; K]
//!   H_vis         [f32; N * d_m]    row-major
//!   H_aux         [f32; N_a * d_a]  row-major
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::perception::{judge, PerceptionRecord, VerbalizerSet};
use crate::seed::rng_for;
use crate::tensor::Mat;

pub const CONTAINER_MAGIC: &[u8; 8] = b"DPCVQA01";
pub const CONTAINER_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContainerHeader {
    pub version: u32,
    pub k: u32,
    pub d_m: u32,
    pub d_a: u32,
    pub record_count: u64,
    pub mos_scale_lo: f32,
    pub mos_scale_hi: f32,
}

impl ContainerHeader {
    pub fn new(k: u32, d_m: u32, d_a: u32, mos_scale: (f32, f32)) -> Self {
        Self {
            version: CONTAINER_VERSION,
            k,
            d_m,
            d_a,
            record_count: 0,
            mos_scale_lo: mos_scale.0,
            mos_scale_hi: mos_scale.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONTAINER_VERSION {
            return Err(Error::Version(self.version));
        }
        if self.k < 2 {
            return Err(Error::Format {
                offset: 12,
                msg: format!("K must be at least 2, got {}", self.k),
            });
        }
        if self.d_m < 1 {
            return Err(Error::Format {
                offset: 16,
                msg: "d_m must be at least 1".into(),
            });
        }
        let (lo, hi) = (self.mos_scale_lo, self.mos_scale_hi);
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Format {
                offset: 32,
                msg: format!("MOS scale [{lo}, {hi}] is not a finite increasing interval"),
            });
        }
        Ok(())
    }
}

/// A loaded container. Immutable once read.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub records: Vec<PerceptionRecord>,
}

impl Container {
    /// Build a container, setting `record_count` from `records`.
    pub fn new(mut header: ContainerHeader, records: Vec<PerceptionRecord>) -> Self {
        header.record_count = records.len() as u64;
        Self { header, records }
    }

    pub fn get(&self, id: &str) -> Option<&PerceptionRecord> {
        self.records.iter().find(|r| r.video_id == id)
    }

    /// Normalized MOS for a record, `None` when unlabeled.
    pub fn label(&self, record: &PerceptionRecord) -> Result<Option<f64>> {
        record
            .mos_raw
            .map(|raw| normalize_mos(raw as f64, &self.header))
            .transpose()
    }

    pub fn labeled_ids(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.mos_raw.is_some())
            .map(|r| r.video_id.clone())
            .collect()
    }

    pub fn verbalizers(&self) -> Result<VerbalizerSet> {
        VerbalizerSet::with_size(self.header.k as usize)
    }
}

/// Map a raw MOS onto `[0, 1]` using the header's declared scale.
pub fn normalize_mos(mos_raw: f64, header: &ContainerHeader) -> Result<f64> {
    let lo = header.mos_scale_lo as f64;
    let hi = header.mos_scale_hi as f64;
    if !mos_raw.is_finite() || mos_raw < lo || mos_raw > hi {
        return Err(Error::InvalidInput(format!(
            "MOS {mos_raw} outside declared scale [{lo}, {hi}]"
        )));
    }
    Ok((mos_raw - lo) / (hi - lo))
}

pub fn validate_record(record: &PerceptionRecord, header: &ContainerHeader) -> Result<()> {
    let id = || record.video_id.clone();
    let check_len = |field, expected: usize, actual: usize| {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::Length {
                id: id(),
                field,
                expected,
                actual,
            })
        }
    };
    check_len("logits", header.k as usize, record.logits.len())?;
    check_len("visual width", header.d_m as usize, record.visual.cols())?;
    check_len("aux width", header.d_a as usize, record.aux.cols())?;
    if record.visual.rows() == 0 {
        return Err(Error::EmptyVisual { id: id() });
    }
    let finite = |xs: &[f32]| xs.iter().all(|x| x.is_finite());
    for (field, values) in [
        ("logits", record.logits.as_slice()),
        ("visual tokens", record.visual.as_slice()),
        ("aux tokens", record.aux.as_slice()),
    ] {
        if !finite(values) {
            return Err(Error::NonFinite { id: id(), field });
        }
    }
    if let Some(mos) = record.mos_raw {
        if !mos.is_finite() {
            return Err(Error::NonFinite { id: id(), field: "mos" });
        }
        let (lo, hi) = (header.mos_scale_lo, header.mos_scale_hi);
        if mos < lo || mos > hi {
            return Err(Error::MosOutOfRange {
                id: id(),
                value: mos,
                lo,
                hi,
            });
        }
    }
    Ok(())
}

pub fn encode_container(container: &Container) -> Result<Vec<u8>> {
    let header = &container.header;
    header.validate()?;
    if header.record_count != container.records.len() as u64 {
        return Err(Error::Format {
            offset: 20,
            msg: format!(
                "header declares {} records but {} were given",
                header.record_count,
                container.records.len()
            ),
        });
    }
    let mut buf = Vec::with_capacity(HEADER_LEN);
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&header.version.to_le_bytes());
    buf.extend_from_slice(&header.k.to_le_bytes());
    buf.extend_from_slice(&header.d_m.to_le_bytes());
    buf.extend_from_slice(&header.d_a.to_le_bytes());
    buf.extend_from_slice(&header.record_count.to_le_bytes());
    buf.extend_from_slice(&header.mos_scale_lo.to_le_bytes());
    buf.extend_from_slice(&header.mos_scale_hi.to_le_bytes());
    debug_assert_eq!(buf.len(), HEADER_LEN);

    let put_f32s = |buf: &mut Vec<u8>, xs: &[f32]| {
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    for record in &container.records {
        validate_record(record, header)?;
        let id = record.video_id.as_bytes();
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&(record.visual.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(record.aux.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&record.mos_raw.unwrap_or(f32::NAN).to_le_bytes());
        put_f32s(&mut buf, &record.logits);
        put_f32s(&mut buf, record.visual.as_slice());
        put_f32s(&mut buf, record.aux.as_slice());
    }
    Ok(buf)
}

pub fn write_container(path: impl AsRef<Path>, container: &Container) -> Result<()> {
    let bytes = encode_container(container)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated {
                expected: self.pos as u64 + n as u64,
                actual: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// `n` finite floats; a non-finite entry reports its byte offset.
    fn finite_f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format {
            offset: start as u64,
            msg: format!("{what} size overflows"),
        })?)?;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::Format {
                    offset: (start + 4 * i) as u64,
                    msg: format!("non-finite value in {what}"),
                });
            }
            out.push(x);
        }
        Ok(out)
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CONTAINER_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let header = ContainerHeader {
        version: cur.u32()?,
        k: cur.u32()?,
        d_m: cur.u32()?,
        d_a: cur.u32()?,
        record_count: cur.u64()?,
        mos_scale_lo: cur.f32()?,
        mos_scale_hi: cur.f32()?,
    };
    header.validate()?;

    let (k, d_m, d_a) = (header.k as usize, header.d_m as usize, header.d_a as usize);
    let mut records = Vec::new();
    for _ in 0..header.record_count {
        let record_start = cur.pos as u64;
        let id_len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| Error::Format {
                offset: record_start + 4,
                msg: "video id is not valid UTF-8".into(),
            })?
            .to_owned();
        let n = cur.u32()? as usize;
        let n_a = cur.u32()? as usize;
        if n == 0 {
            return Err(Error::Format {
                offset: record_start + 4 + id_len as u64,
                msg: format!("record `{id}` has no visual tokens"),
            });
        }
        let mos_offset = cur.pos as u64;
        let mos = cur.f32()?;
        let mos_raw = if mos.is_nan() {
            None
        } else if mos.is_finite() {
            Some(mos)
        } else {
            return Err(Error::Format {
                offset: mos_offset,
                msg: format!("record `{id}` has an infinite MOS"),
            });
        };
        let logits = cur.finite_f32s(k, "logits")?;
        let visual = Mat::from_vec(n, d_m, cur.finite_f32s(n * d_m, "visual tokens")?);
        let aux = Mat::from_vec(n_a, d_a, cur.finite_f32s(n_a * d_a, "aux tokens")?);
        let record = PerceptionRecord {
            video_id: id,
            logits,
            visual,
            aux,
            mos_raw,
        };
        validate_record(&record, &header).map_err(|e| Error::Format {
            offset: record_start,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes after last record", bytes.len() - cur.pos),
        });
    }
    Ok(Container { header, records })
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    decode_container(&fs::read(path)?)
}

/// Knobs for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub record_count: usize,
    pub k: usize,
    pub d_m: usize,
    pub d_a: usize,
    pub n: usize,
    pub n_a: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            record_count: 500,
            k: 5,
            d_m: 32,
            d_a: 16,
            n: 8,
            n_a: 4,
            noise_sigma: 0.01,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if self.record_count == 0 {
            return bad("record_count must be positive");
        }
        if self.k < 2 {
            return bad("K must be at least 2");
        }
        if self.d_m == 0 || self.n == 0 {
            return bad("d_m and N must be positive");
        }
        if self.n_a > 0 && self.d_a == 0 {
            return bad("auxiliary tokens need a positive d_a");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a finite nonnegative number");
        }
        Ok(())
    }
}

/// MOS scale written into synthetic headers (a 5-point ACR scale).
pub const SYNTHETIC_MOS_SCALE: (f32, f32) = (1.0, 5.0);

/// The planted correction: a linear pull toward the scale middle plus a
/// bounded content term. `|r| <= 0.125`.
pub fn planted_residual(q_b: f64, content: f64) -> f64 {
    0.15 * (0.5 - q_b) + 0.05 * content.tanh()
}

/// Ground-truth normalized MOS for a synthetic record.
pub fn planted_target(q_b: f64, content: f64, noise: f64) -> f64 {
    (q_b + planted_residual(q_b, content) + noise).clamp(0.0, 1.0)
}

/// `w · mean_rows(H_vis)`: the content statistic the planted residual reads.
pub fn content_statistic(visual: &Mat<f32>, direction: &[f64]) -> f64 {
    let n = visual.rows() as f64;
    (0..visual.cols())
        .map(|c| {
            let col_mean = (0..visual.rows()).map(|r| visual.get(r, c) as f64).sum::<f64>() / n;
            direction[c] * col_mean
        })
        .sum()
}

/// Seed-derived unit vector the planted content term projects onto.
pub fn planted_direction(seed: u64, d_m: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, "synthetic/direction");
    let v: Vec<f64> = (0..d_m).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Deterministic synthetic container with a learnable residual planted on
/// top of the base score.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Container> {
    cfg.validate()?;
    let vset = VerbalizerSet::with_size(cfg.k)?;
    let direction = planted_direction(cfg.seed, cfg.d_m);
    let mut rng = rng_for(cfg.seed, "synthetic/records");
    let (lo, hi) = SYNTHETIC_MOS_SCALE;
    let width = cfg.record_count.saturating_sub(1).to_string().len();

    let mut records = Vec::with_capacity(cfg.record_count);
    for i in 0..cfg.record_count {
        // Peaked logits around a target level; q_b tracks the target.
        let target: f64 = rng.random_range(0.0..=1.0);
        let sharpness: f64 = rng.random_range(20.0..60.0);
        let logits: Vec<f32> = vset
            .anchors()
            .iter()
            .map(|&c| {
                let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * 0.25;
                (-sharpness * (c - target).powi(2) + jitter) as f32
            })
            .collect();
        let mut normal_f32 = |len: usize| -> Vec<f32> {
            (0..len)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                .collect()
        };
        let visual = Mat::from_vec(cfg.n, cfg.d_m, normal_f32(cfg.n * cfg.d_m));
        let aux = Mat::from_vec(cfg.n_a, cfg.d_a, normal_f32(cfg.n_a * cfg.d_a));
        let noise = if cfg.noise_sigma > 0.0 {
            rng.sample::<f64, _>(StandardNormal) * cfg.noise_sigma
        } else {
            0.0
        };

        let mut record = PerceptionRecord {
            video_id: format!("syn{i:0width$}"),
            logits,
            visual,
            aux,
            mos_raw: None,
        };
        let q_b = judge(&record, &vset)?.q_b;
        let y = planted_target(q_b, content_statistic(&record.visual, &direction), noise);
        let raw = (lo as f64 + y * (hi - lo) as f64) as f32;
        record.mos_raw = Some(raw.clamp(lo, hi));
        records.push(record);
    }
    let header = ContainerHeader::new(cfg.k as u32, cfg.d_m as u32, cfg.d_a as u32, (lo, hi));
    Ok(Container::new(header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::metrics::srcc;

    fn small() -> Container {
        generate_synthetic(&SyntheticConfig {
            record_count: 3,
            d_m: 4,
            d_a: 3,
            n: 2,
            n_a: 1,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn empty_container_is_header_only() {
        let c = Container::new(ContainerHeader::new(5, 4, 3, (1.0, 5.0)), vec![]);
        let bytes = encode_container(&c).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(bytes.len(), 8 + 4 + 4 + 4 + 4 + 8 + 4 + 4);
        assert_eq!(decode_container(&bytes).unwrap(), c);
    }

    #[test]
    fn round_trip_small_container() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.dpcf");
        write_container(&path, &c).unwrap();
        assert_eq!(read_container(&path).unwrap(), c);
    }

    #[test]
    fn unlabeled_record_round_trips_as_none() {
        let mut c = small();
        c.records[1].mos_raw = None;
        let back = decode_container(&encode_container(&c).unwrap()).unwrap();
        assert_eq!(back.records[1].mos_raw, None);
        assert_eq!(back, c);
    }

    #[test]
    fn zero_visual_tokens_rejected_on_write() {
        let mut c = small();
        c.records[0].visual = Mat::zeros(0, 4);
        let err = encode_container(&c).unwrap_err();
        assert!(matches!(err, Error::EmptyVisual { ref id } if id == "syn0"), "{err}");
    }

    #[test]
    fn dimension_mismatch_names_record() {
        let mut c = small();
        c.records[2].visual = Mat::zeros(2, 5);
        let err = encode_container(&c).unwrap_err();
        assert!(err.to_string().contains("syn2"), "{err}");
    }

    #[test]
    fn bad_magic_detected() {
        let mut bytes = encode_container(&small()).unwrap();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(decode_container(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncation_reports_lengths() {
        let bytes = encode_container(&small()).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        match decode_container(cut) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(actual, cut.len() as u64);
                assert!(expected > actual);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn nan_in_payload_reports_offset() {
        let c = small();
        let mut bytes = encode_container(&c).unwrap();
        // first visual value of record 0
        let off = HEADER_LEN + 4 + "syn0".len() + 4 + 4 + 4 + 4 * 5;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_container(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, off as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn normalize_examples() {
        let h = ContainerHeader::new(5, 1, 0, (1.0, 5.0));
        assert_eq!(normalize_mos(3.0, &h).unwrap(), 0.5);
        assert_eq!(normalize_mos(1.0, &h).unwrap(), 0.0);
        assert!(normalize_mos(5.5, &h).is_err());
        let h = ContainerHeader::new(5, 1, 0, (0.0, 100.0));
        assert!((normalize_mos(73.0, &h).unwrap() - 0.73).abs() < 1e-12);
    }

    #[test]
    fn validate_record_errors_are_distinct() {
        let c = small();
        let h = &c.header;
        let good = &c.records[0];
        assert!(validate_record(good, h).is_ok());

        let mut r = good.clone();
        r.logits.pop();
        assert!(matches!(validate_record(&r, h), Err(Error::Length { field: "logits", .. })));

        let mut r = good.clone();
        r.visual.set(0, 0, f32::INFINITY);
        assert!(matches!(
            validate_record(&r, h),
            Err(Error::NonFinite { field: "visual tokens", .. })
        ));

        let mut r = good.clone();
        r.mos_raw = Some(9.0);
        assert!(matches!(validate_record(&r, h), Err(Error::MosOutOfRange { .. })));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            record_count: 20,
            ..SyntheticConfig::default()
        };
        let a = encode_container(&generate_synthetic(&cfg).unwrap()).unwrap();
        let b = encode_container(&generate_synthetic(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SyntheticConfig { seed: 8, ..cfg };
        assert_ne!(a, encode_container(&generate_synthetic(&other).unwrap()).unwrap());
    }

    #[test]
    fn planted_residual_vanishes_at_fixed_point() {
        assert_eq!(planted_target(0.5, 0.0, 0.0), 0.5);
        assert!(planted_residual(0.0, 50.0).abs() <= 0.2);
        assert!(planted_residual(1.0, -50.0).abs() <= 0.2);
    }

    #[test]
    fn zero_config_rejected() {
        let cfg = SyntheticConfig {
            record_count: 0,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn base_prior_is_informative_but_imperfect() {
        let c = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let vset = c.verbalizers().unwrap();
        let mut q = Vec::new();
        let mut y = Vec::new();
        for r in &c.records {
            q.push(judge(r, &vset).unwrap().q_b);
            y.push(c.label(r).unwrap().unwrap());
        }
        let rho = srcc(&q, &y).unwrap();
        assert!(rho < 1.0 && rho > 0.5, "base SRCC {rho}");
    }
}
