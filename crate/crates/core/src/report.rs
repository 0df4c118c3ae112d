//! CSV reports: loss traces, metric tables and ablation grids.
//!
//! Every number is written with four decimals and rows end in `\n`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::color::{load_image, luma, Plane};
use crate::config::{AblationEntry, FusionConfig};
use crate::error::{Error, Result};
use crate::losses::{loss_exp_value, EXP_REGION};
use crate::metrics::{evaluate, MetricRow};
use crate::pipeline::{forward_pipeline, init_model};
use crate::trainer::{ExposurePair, LumaPair, StepRecord, Trainer};

pub const TRACE_HEADER: &str = "step,L_spa,L_exp,L_is,L_int,L_grad,L_ssim,total";

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn trace_row(r: &StepRecord) -> String {
    let l = &r.losses;
    let vals = [l.spa, l.exp, l.is, l.int, l.grad, l.ssim, l.total].map(fmt4);
    format!("{},{}\n", r.step, vals.join(","))
}

pub fn trace_csv(records: &[StepRecord]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in records {
        out.push_str(&trace_row(r));
    }
    out
}

fn metric_cells(m: &MetricRow) -> String {
    m.values().map(fmt4).join(",")
}

/// Per-image metric rows followed by their mean.
pub fn metrics_csv(rows: &[(String, MetricRow)]) -> String {
    let mut out = format!("image,{}\n", MetricRow::HEADER.join(","));
    for (name, m) in rows {
        out.push_str(&format!("{},{}\n", csv_field(name), metric_cells(m)));
    }
    let only: Vec<MetricRow> = rows.iter().map(|(_, m)| *m).collect();
    out.push_str(&format!("mean,{}\n", metric_cells(&MetricRow::mean(&only))));
    out
}

/// One ablation variant evaluated on the held-out pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub metrics: MetricRow,
    /// Exposure loss of the fused luma.
    pub l_exp: f64,
    pub final_train_loss: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("variant,{},L_exp\n", MetricRow::HEADER.join(","));
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            csv_field(&r.name),
            metric_cells(&r.metrics),
            fmt4(r.l_exp)
        ));
    }
    out
}

const ROLES: [&str; 3] = ["_fused", "_under", "_over"];

/// Base stem and role suffix of an image file name.
fn eval_stem(path: &Path) -> Option<(String, Option<&'static str>)> {
    let stem = path.file_stem()?.to_str()?;
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if ext != "png" && ext != "ppm" {
        return None;
    }
    Some(
        ROLES
            .iter()
            .find_map(|s| stem.strip_suffix(s).map(|b| (b.to_string(), Some(*s))))
            .unwrap_or((stem.to_string(), None)),
    )
}

/// Images of `dir` by base stem, ignoring files tagged with another role
/// so one directory can hold both exposures.
fn index_dir(dir: &Path, role: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        match eval_stem(&path) {
            Some((stem, tag)) if tag.is_none_or(|t| t == role) => {
                out.insert(stem, path);
            }
            _ => {}
        }
    }
    Ok(out)
}

/// `(stem, [fused, under, over])` triples.
pub type Matched = Vec<(String, [PathBuf; 3])>;

/// Triples matched across the three directories by stem (a trailing
/// `_fused`, `_under` or `_over` is ignored), plus the names that were
/// missing somewhere.
pub fn match_eval_dirs(fused: &Path, under: &Path, over: &Path) -> Result<(Matched, Vec<String>)> {
    let (f, u, o) = (
        index_dir(fused, "_fused")?,
        index_dir(under, "_under")?,
        index_dir(over, "_over")?,
    );
    let mut names: Vec<&String> = f.keys().chain(u.keys()).chain(o.keys()).collect();
    names.sort();
    names.dedup();
    let mut matched = Vec::new();
    let mut skipped = Vec::new();
    for n in names {
        match (f.get(n), u.get(n), o.get(n)) {
            (Some(a), Some(b), Some(c)) => {
                matched.push((n.clone(), [a.clone(), b.clone(), c.clone()]))
            }
            _ => skipped.push(n.clone()),
        }
    }
    Ok((matched, skipped))
}

pub type MetricRows = Vec<(String, MetricRow)>;

/// Scores every matched fused image against its sources.
pub fn evaluate_dirs(
    fused: &Path,
    under: &Path,
    over: &Path,
    cfg: &FusionConfig,
) -> Result<(MetricRows, Vec<String>)> {
    let (matched, skipped) = match_eval_dirs(fused, under, over)?;
    let rows = matched
        .par_iter()
        .map(|(name, [f, u, o])| {
            let fi = load_image::<f64>(f)?;
            let ui = load_image::<f64>(u)?;
            let oi = load_image::<f64>(o)?;
            if fi.dims() != ui.dims() || fi.dims() != oi.dims() {
                return Err(Error::Data(format!("{name}: image sizes differ")));
            }
            Ok((name.clone(), evaluate(&fi, &oi, &ui, &cfg.metrics)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, skipped))
}

/// Exposure loss of a plane over its largest top-left region that tiles
/// into 16x16 blocks.
pub fn fused_exposure_loss(y: &Plane<f32>) -> Result<f64> {
    let (w, h) = y.dims();
    let (cw, ch) = (w / EXP_REGION * EXP_REGION, h / EXP_REGION * EXP_REGION);
    if cw == 0 || ch == 0 {
        return Err(Error::Data(format!(
            "{w}x{h} image is smaller than one exposure region"
        )));
    }
    Ok(loss_exp_value(&y.crop(0, 0, cw, ch))?)
}

/// Splits pairs into training and held-out sets: the last fifth (at least
/// one) is held out. A single pair is used for both.
pub fn holdout_split<T: Clone>(pairs: &[T]) -> (Vec<T>, Vec<T>) {
    if pairs.len() < 2 {
        return (pairs.to_vec(), pairs.to_vec());
    }
    let held = (pairs.len() / 5).max(1);
    let cut = pairs.len() - held;
    (pairs[..cut].to_vec(), pairs[cut..].to_vec())
}

/// Trains one model per grid entry and scores it on `held_out`.
pub fn run_ablation(
    train: &[ExposurePair<f32>],
    held_out: &[ExposurePair<f32>],
    cfg: &FusionConfig,
    grid: &[AblationEntry],
    mut on_variant: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let lumas: Vec<LumaPair<f32>> = train.iter().map(LumaPair::from).collect();
    let mut rows = Vec::with_capacity(grid.len());
    for entry in grid {
        let vcfg = cfg.with_ablation(entry.ablation);
        let params = init_model::<f32>(&vcfg, &mut ChaCha8Rng::seed_from_u64(vcfg.seed))?;
        let steps = vcfg.train.total_steps(lumas.len());
        let mut trainer = Trainer::new(vcfg.clone(), params, steps);
        let trace = trainer.run(&lumas, |_, _| Ok(()))?;
        let tail = &trace[trace.len().saturating_sub(10)..];
        let final_train_loss =
            tail.iter().map(|r| r.losses.total).sum::<f64>() / tail.len().max(1) as f64;
        let mut metrics = Vec::with_capacity(held_out.len());
        let mut l_exp = 0.0;
        for p in held_out {
            let out = forward_pipeline(&p.over, &p.under, &trainer.params, &vcfg)?;
            metrics.push(evaluate(&out.image, &p.over, &p.under, &vcfg.metrics)?);
            l_exp += fused_exposure_loss(&luma(&out.image))? / held_out.len() as f64;
        }
        let row = AblationRow {
            name: entry.name.clone(),
            metrics: MetricRow::mean(&metrics),
            l_exp,
            final_train_loss,
        };
        on_variant(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossBreakdown;

    #[test]
    fn trace_format() {
        let r = StepRecord {
            step: 3,
            lr: 0.1,
            losses: LossBreakdown {
                spa: 0.5,
                exp: 1.0 / 3.0,
                is: 0.0,
                int: 2.0,
                grad: 1e-6,
                ssim: 0.25,
                total: 12.34567,
            },
            min_group_grad: 1.0,
        };
        assert_eq!(
            trace_csv(&[r]),
            "step,L_spa,L_exp,L_is,L_int,L_grad,L_ssim,total\n3,0.5000,0.3333,0.0000,2.0000,0.0000,0.2500,12.3457\n"
        );
    }

    #[test]
    fn metrics_table_has_mean() {
        let m = MetricRow {
            psnr: 10.0,
            cs: 0.5,
            cc: 1.0,
            nmi: 2.0,
            q_ncie: 0.8,
        };
        let m2 = MetricRow { psnr: 20.0, ..m };
        let csv = metrics_csv(&[("a".into(), m), ("b,c".into(), m2)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image,PSNR,CS,CC,NMI,Q_ncie");
        assert_eq!(lines[2], "\"b,c\",20.0000,0.5000,1.0000,2.0000,0.8000");
        assert_eq!(lines[3], "mean,15.0000,0.5000,1.0000,2.0000,0.8000");
    }

    #[test]
    fn split_sizes() {
        let v: Vec<u32> = (0..10).collect();
        let (a, b) = holdout_split(&v);
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a, b) = holdout_split(&v[..3]);
        assert_eq!((a.len(), b.len()), (2, 1));
        let (a, b) = holdout_split(&v[..1]);
        assert_eq!((a, b), (vec![0], vec![0]));
    }

    #[test]
    fn eval_matching() {
        let root = tempfile::tempdir().unwrap();
        let d = |n: &str| {
            let p = root.path().join(n);
            fs::create_dir(&p).unwrap();
            p
        };
        let (f, u, o) = (d("f"), d("u"), d("o"));
        for (dir, name) in [
            (&f, "x.png"),
            (&u, "x_under.png"),
            (&o, "x_over.png"),
            (&f, "y.png"),
            (&u, "y.png"),
        ] {
            fs::write(dir.join(name), b"").unwrap();
        }
        let (m, s) = match_eval_dirs(&f, &u, &o).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].0, "x");
        assert_eq!(s, vec!["y".to_string()]);
    }

    #[test]
    fn shared_source_dir() {
        let root = tempfile::tempdir().unwrap();
        let (f, src) = (root.path().join("f"), root.path().join("src"));
        fs::create_dir(&f).unwrap();
        fs::create_dir(&src).unwrap();
        fs::write(f.join("x.png"), b"").unwrap();
        fs::write(src.join("x_under.png"), b"").unwrap();
        fs::write(src.join("x_over.png"), b"").unwrap();
        let (m, s) = match_eval_dirs(&f, &src, &src).unwrap();
        assert!(s.is_empty());
        assert_eq!(m[0].1[1], src.join("x_under.png"));
        assert_eq!(m[0].1[2], src.join("x_over.png"));
    }
}
