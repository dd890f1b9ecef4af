use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{aggregate, evaluate_image, EvalRecord, ImageMetrics};
use crate::error::{data_err, Result};

/// Dataset-wide record plus one record per group.
#[derive(Clone, Debug)]
pub struct DatasetEval {
    pub name: String,
    pub record: EvalRecord,
    pub groups: Vec<(String, EvalRecord)>,
}

fn read_gray(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| data_err(path, format!("cannot decode: {e}")))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(), h as usize, w as usize))
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            out.push((path.file_name().unwrap().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn score_pair(pred_path: &Path, gt_path: &Path) -> Result<ImageMetrics> {
    let (pred, h, w) = read_gray(pred_path)?;
    let (gt, gh, gw) = read_gray(gt_path)?;
    if (h, w) != (gh, gw) {
        return Err(data_err(
            pred_path,
            format!("prediction is {w}x{h} but its mask {} is {gw}x{gh}", gt_path.display()),
        ));
    }
    let gt: Vec<f64> = gt.iter().map(|&g| if g >= 0.5 { 1.0 } else { 0.0 }).collect();
    evaluate_image(&pred, &gt, h, w)
}

/// Scores every prediction PNG under `pred_dir` against the same-stem mask in `gt_dir`.
///
/// Both trees are either flat or hold one sub-directory per group.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, name: &str) -> Result<DatasetEval> {
    let mut groups = subdirs(pred_dir)?;
    if groups.is_empty() {
        groups.push((String::new(), pred_dir.to_path_buf()));
    }
    let mut pairs = Vec::new();
    for (gi, (group, dir)) in groups.iter().enumerate() {
        let gt_group = if group.is_empty() { gt_dir.to_path_buf() } else { gt_dir.join(group) };
        for (stem, pred_path) in png_stems(dir)? {
            let gt_path = gt_group.join(format!("{stem}.png"));
            if !gt_path.is_file() {
                return Err(data_err(&pred_path, format!("no ground-truth mask for `{stem}`")));
            }
            pairs.push((gi, pred_path, gt_path));
        }
    }
    if pairs.is_empty() {
        return Err(data_err(pred_dir, "no prediction PNGs found"));
    }
    let scored: Vec<Result<ImageMetrics>> = pairs
        .par_iter()
        .map(|(_, p, g)| score_pair(p, g))
        .collect();
    let scored = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let record = aggregate(&scored)?;
    let mut per_group = Vec::new();
    for (gi, (group, _)) in groups.iter().enumerate() {
        let items: Vec<ImageMetrics> = pairs
            .iter()
            .zip(&scored)
            .filter(|((g, _, _), _)| *g == gi)
            .map(|(_, m)| m.clone())
            .collect();
        if !items.is_empty() {
            per_group.push((group.clone(), aggregate(&items)?));
        }
    }
    Ok(DatasetEval {
        name: name.to_string(),
        record,
        groups: per_group,
    })
}

fn row(label: &str, r: &EvalRecord) -> String {
    format!(
        "{label},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        r.images, r.s_m, r.e_m, r.e_m_max, r.f_m, r.f_m_max, r.mae
    )
}

/// Writes `metrics.csv`, `groups.csv` and `curves/<name>_{pr,fm}.csv` under `out`.
pub fn write_reports(out: &Path, eval: &DatasetEval) -> Result<()> {
    std::fs::create_dir_all(out.join("curves"))?;
    let header = "images,S_m,E_m,E_m_max,F_m,F_m_max,MAE\n";
    std::fs::write(
        out.join("metrics.csv"),
        format!("dataset,{header}{}", row(&eval.name, &eval.record)),
    )?;
    let mut groups = format!("group,{header}");
    for (g, r) in &eval.groups {
        groups.push_str(&row(g, r));
    }
    std::fs::write(out.join("groups.csv"), groups)?;
    let mut pr = String::from("threshold,precision,recall\n");
    let mut fm = String::from("threshold,f_measure\n");
    for (t, ((p, r), f)) in eval.record.pr_curve.iter().zip(&eval.record.fm_curve).enumerate() {
        let _ = writeln!(pr, "{t},{p:.6},{r:.6}");
        let _ = writeln!(fm, "{t},{f:.6}");
    }
    std::fs::write(out.join("curves").join(format!("{}_pr.csv", eval.name)), pr)?;
    std::fs::write(out.join("curves").join(format!("{}_fm.csv", eval.name)), fm)?;
    Ok(())
}
