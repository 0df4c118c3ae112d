//! Fusion quality metrics: PSNR, colorfulness, correlation coefficient,
//! normalized mutual information and nonlinear correlation information
//! entropy.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::color::{luma, Plane, RgbImage};
use crate::scalar::Scalar;
use crate::tensor::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub bins: usize,
    pub peak: f64,
    /// PSNR reported for a zero mean squared error.
    pub psnr_cap: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bins: 256,
            peak: 1.0,
            psnr_cap: 100.0,
        }
    }
}

fn check<T: Scalar>(op: &'static str, a: &Plane<T>, b: &Plane<T>) -> Result<()> {
    if a.dims() != b.dims() {
        let (aw, ah) = a.dims();
        let (bw, bh) = b.dims();
        return Err(TensorError::ShapeMismatch {
            op,
            left: vec![ah, aw],
            right: vec![bh, bw],
        });
    }
    Ok(())
}

/// PSNR of one pair in dB.
pub fn psnr_pair<T: Scalar>(a: &Plane<T>, b: &Plane<T>, cfg: &MetricConfig) -> Result<f64> {
    check("psnr", a, b)?;
    let n = a.len() as f64;
    let mse: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(cfg.psnr_cap);
    }
    Ok((10.0 * (cfg.peak * cfg.peak / mse).log10()).min(cfg.psnr_cap))
}

/// Mean PSNR of the fused plane against both sources.
pub fn psnr<T: Scalar>(
    fused: &Plane<T>,
    src1: &Plane<T>,
    src2: &Plane<T>,
    cfg: &MetricConfig,
) -> Result<f64> {
    Ok(0.5 * (psnr_pair(fused, src1, cfg)? + psnr_pair(fused, src2, cfg)?))
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Hasler-Süsstrunk colorfulness on `[0,1]` channels.
pub fn colorfulness<T: Scalar>(img: &RgbImage<T>) -> f64 {
    let px = img.pixels();
    let rg = px.iter().map(|p| p[0].as_f64() - p[1].as_f64());
    let yb = px
        .iter()
        .map(|p| 0.5 * (p[0].as_f64() + p[1].as_f64()) - p[2].as_f64());
    let (m_rg, s_rg) = mean_std(rg);
    let (m_yb, s_yb) = mean_std(yb);
    (s_rg * s_rg + s_yb * s_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt()
}

/// Pearson correlation; zero when either plane is constant.
pub fn pearson<T: Scalar>(a: &Plane<T>, b: &Plane<T>) -> Result<f64> {
    check("pearson", a, b)?;
    let constant = |p: &Plane<T>| p.values().iter().all(|&v| v == p.values()[0]);
    if constant(a) || constant(b) {
        return Ok(0.0);
    }
    let n = a.len() as f64;
    let ma = a.values().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mb = b.values().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values().iter().zip(b.values()) {
        let (dx, dy) = (x.as_f64() - ma, y.as_f64() - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn correlation_coefficient<T: Scalar>(
    fused: &Plane<T>,
    src1: &Plane<T>,
    src2: &Plane<T>,
) -> Result<f64> {
    Ok(0.5 * (pearson(fused, src1)? + pearson(fused, src2)?))
}

#[inline]
fn bin(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Joint histogram of two planes normalized to probabilities.
pub struct JointHistogram {
    bins: usize,
    p: Vec<f64>,
}

impl JointHistogram {
    pub fn new<T: Scalar>(a: &Plane<T>, b: &Plane<T>, bins: usize) -> Result<Self> {
        check("histogram", a, b)?;
        if bins < 2 {
            return Err(TensorError::InvalidArgument {
                op: "histogram",
                msg: format!("need at least 2 bins, got {bins}"),
            });
        }
        let mut counts = vec![0u64; bins * bins];
        for (x, y) in a.values().iter().zip(b.values()) {
            counts[bin(x.as_f64(), bins) * bins + bin(y.as_f64(), bins)] += 1;
        }
        let n = a.len() as f64;
        Ok(Self {
            bins,
            p: counts.into_iter().map(|c| c as f64 / n).collect(),
        })
    }

    fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.bins;
        let mut pa = vec![0.0; b];
        let mut pb = vec![0.0; b];
        for i in 0..b {
            for j in 0..b {
                pa[i] += self.p[i * b + j];
                pb[j] += self.p[i * b + j];
            }
        }
        (pa, pb)
    }

    /// `(H(A), H(B), I(A;B))` in bits.
    pub fn entropies(&self) -> (f64, f64, f64) {
        let (pa, pb) = self.marginals();
        let h = |p: &[f64]| {
            -p.iter()
                .filter(|&&v| v > 0.0)
                .map(|v| v * v.log2())
                .sum::<f64>()
        };
        let b = self.bins;
        let mut mi = 0.0;
        for i in 0..b {
            for j in 0..b {
                let pij = self.p[i * b + j];
                if pij > 0.0 {
                    mi += pij * (pij / (pa[i] * pb[j])).log2();
                }
            }
        }
        (h(&pa), h(&pb), mi.max(0.0))
    }
}

/// `Σ_A 2 I(A;F) / (H(A) + H(F))` over both sources.
pub fn nmi<T: Scalar>(
    fused: &Plane<T>,
    src1: &Plane<T>,
    src2: &Plane<T>,
    cfg: &MetricConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for s in [src1, src2] {
        let (ha, hf, mi) = JointHistogram::new(s, fused, cfg.bins)?.entropies();
        if ha + hf > 0.0 {
            total += 2.0 * mi / (ha + hf);
        }
    }
    Ok(total)
}

/// Nonlinear correlation coefficient: mutual information in base `bins`.
pub fn ncc<T: Scalar>(a: &Plane<T>, b: &Plane<T>, bins: usize) -> Result<f64> {
    let (_, _, mi) = JointHistogram::new(a, b, bins)?.entropies();
    Ok(mi / (bins as f64).log2())
}

pub fn q_ncie<T: Scalar>(
    fused: &Plane<T>,
    src1: &Plane<T>,
    src2: &Plane<T>,
    cfg: &MetricConfig,
) -> Result<f64> {
    let planes = [src1, src2, fused];
    let mut r = Matrix3::<f64>::identity();
    for i in 0..3 {
        for j in i + 1..3 {
            let v = ncc(planes[i], planes[j], cfg.bins)?;
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(r);
    let lb = (cfg.bins as f64).ln();
    let mut q = 1.0;
    for &l in eig.eigenvalues.iter() {
        let t = l / 3.0;
        if t > 1e-12 {
            q += t * t.ln() / lb;
        }
    }
    Ok(q)
}

/// All five metrics of one fused image.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricRow {
    pub psnr: f64,
    pub cs: f64,
    pub cc: f64,
    pub nmi: f64,
    pub q_ncie: f64,
}

impl MetricRow {
    pub const HEADER: [&'static str; 5] = ["PSNR", "CS", "CC", "NMI", "Q_ncie"];

    pub fn values(&self) -> [f64; 5] {
        [self.psnr, self.cs, self.cc, self.nmi, self.q_ncie]
    }

    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let n = rows.len().max(1) as f64;
        let mut m = MetricRow::default();
        for r in rows {
            m.psnr += r.psnr / n;
            m.cs += r.cs / n;
            m.cc += r.cc / n;
            m.nmi += r.nmi / n;
            m.q_ncie += r.q_ncie / n;
        }
        m
    }
}

/// Scores a fused RGB image against its two sources. Plane metrics use
/// the luma channel; colorfulness uses the fused RGB.
pub fn evaluate<T: Scalar>(
    fused: &RgbImage<T>,
    src1: &RgbImage<T>,
    src2: &RgbImage<T>,
    cfg: &MetricConfig,
) -> Result<MetricRow> {
    let (f, a, b) = (luma(fused), luma(src1), luma(src2));
    Ok(MetricRow {
        psnr: psnr(&f, &a, &b, cfg)?,
        cs: colorfulness(fused),
        cc: correlation_coefficient(&f, &a, &b)?,
        nmi: nmi(&f, &a, &b, cfg)?,
        q_ncie: q_ncie(&f, &a, &b, cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn levels(w: usize, h: usize) -> Plane<f64> {
        Plane::from_fn(w, h, |x, y| ((x * 31 + y * 17) % 256) as f64 / 255.0)
    }

    #[test]
    fn psnr_cases() {
        let cfg = MetricConfig::default();
        let p = levels(8, 8);
        assert_eq!(psnr(&p, &p, &p, &cfg).unwrap(), 100.0);
        let z = Plane::<f64>::filled(4, 4, 0.0);
        let h = Plane::<f64>::filled(4, 4, 0.5);
        assert!((psnr(&z, &h, &h, &cfg).unwrap() - 6.020599913279624).abs() < 1e-12);
    }

    #[test]
    fn colorfulness_cases() {
        let gray = RgbImage::<f64>::from_fn(5, 5, |x, y| [(x + y) as f64 / 8.0; 3]);
        assert_eq!(colorfulness(&gray), 0.0);
        let red = RgbImage::<f64>::from_fn(3, 3, |_, _| [1.0, 0.0, 0.0]);
        assert!((colorfulness(&red) - 0.3 * 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn correlation_cases() {
        let p = levels(8, 8);
        assert!((correlation_coefficient(&p, &p, &p).unwrap() - 1.0).abs() < 1e-12);
        let aff = p.map(|v| 0.3 * v + 0.1);
        assert!((correlation_coefficient(&aff, &p, &p).unwrap() - 1.0).abs() < 1e-12);
        let neg = p.map(|v| -v);
        assert!((pearson(&neg, &p).unwrap() + 1.0).abs() < 1e-12);
        let c = Plane::<f64>::filled(8, 8, 0.3);
        assert_eq!(pearson(&c, &p).unwrap(), 0.0);
    }

    #[test]
    fn nmi_identity_and_hand_case() {
        let cfg = MetricConfig::default();
        let p = levels(16, 16);
        assert!((nmi(&p, &p, &p, &cfg).unwrap() - 2.0).abs() < 1e-12);
        // 2x2, 4 levels: A = [0,1,2,3], F = [0,0,1,1]
        let lv = |v: [f64; 4]| Plane::new(2, 2, v.map(|x| x / 3.0).to_vec()).unwrap();
        let a = lv([0.0, 1.0, 2.0, 3.0]);
        let f = lv([0.0, 0.0, 3.0, 3.0]);
        let c4 = MetricConfig { bins: 4, ..cfg };
        // H(A)=2, H(F)=1, I=1 -> 2/3 per source
        assert!((nmi(&f, &a, &a, &c4).unwrap() - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn q_ncie_limits() {
        let cfg = MetricConfig::default();
        // every level exactly once, so H = log2(bins) and R is all ones
        let p = Plane::from_fn(16, 16, |x, y| (y * 16 + x) as f64 / 255.0);
        assert!((q_ncie(&p, &p, &p, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let x = Plane::from_fn(256, 256, |i, _| i as f64 / 255.0);
        let y = Plane::from_fn(256, 256, |_, j| j as f64 / 255.0);
        let z = Plane::from_fn(256, 256, |i, j| ((i + j) % 256) as f64 / 255.0);
        let q = q_ncie(&z, &x, &y, &cfg).unwrap();
        assert!((q - (1.0 - 3f64.ln() / 256f64.ln())).abs() < 1e-9, "{q}");
        let q2 = q_ncie(&x, &z, &y, &cfg).unwrap();
        assert!((q - q2).abs() < 1e-12);
    }

    #[test]
    fn q_ncie_in_unit_interval() {
        let cfg = MetricConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut mk =
                || Plane::new(12, 12, (0..144).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let (a, b, c) = (mk(), mk(), mk());
            let q = q_ncie(&a, &b, &c, &cfg).unwrap();
            assert!(q > 0.0 && q <= 1.0 + 1e-12, "{q}");
        }
    }
}
