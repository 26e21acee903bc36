//! Style (Fréchet distance) and identity (embedding cosine) metrics over
//! directories of PNG images.

mod embed;
mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use embed::{cosine, identity_similarity, CommandEmbedder, Embedder, ToyEmbedder};
pub use stats::{frechet_distance, FeatureStats, StatsAccumulator, SQRTM_IMAG_TOLERANCE};

use crate::error::{Error, Result};
use crate::image::{load_rgb8, Image};

/// Suffix of the side-by-side preview written next to inference outputs.
pub const GRID_SUFFIX: &str = "__grid";

fn embed_all<T: Sync>(items: &[T], embedder: &dyn Embedder, f: impl Fn(&T) -> Result<Image> + Sync) -> Result<Vec<Vec<f64>>> {
    let one = |item: &T| f(item).and_then(|img| embedder.embed(&img));
    if embedder.is_serial() {
        items.iter().map(one).collect()
    } else {
        items.par_iter().map(one).collect()
    }
}

pub fn feature_stats(images: &[Image], embedder: &dyn Embedder) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::Evaluation(format!("need at least 2 images for covariance, got {}", images.len())));
    }
    FeatureStats::from_embeddings(&embed_all(images, embedder, |img| Ok(img.clone()))?)
}

fn load_image(path: &Path) -> Result<Image> {
    Ok(Image::from_rgb8(&load_rgb8(path)?))
}

fn stats_of_files(paths: &[PathBuf], embedder: &dyn Embedder) -> Result<FeatureStats> {
    if paths.len() < 2 {
        return Err(Error::Evaluation(format!("need at least 2 images for covariance, got {}", paths.len())));
    }
    FeatureStats::from_embeddings(&embed_all(paths, embedder, |p| load_image(p))?)
}

/// Splits an inference output stem `<id>__s<seed>__k<idx>` into its sample id.
/// Any other stem is taken as the id itself, which is how baseline outputs
/// are named.
pub fn sample_id(stem: &str) -> &str {
    let Some((head, k)) = stem.rsplit_once("__k") else { return stem };
    let Some((id, s)) = head.rsplit_once("__s") else { return stem };
    let numeric = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
    if numeric(k) && numeric(s) {
        id
    } else {
        stem
    }
}

/// PNG files of a directory in name order, excluding preview grids. A
/// dataset root (one with an `images/` subdirectory) resolves to that
/// subdirectory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = if dir.join("images").is_dir() { dir.join("images") } else { dir.to_path_buf() };
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let is_grid = path.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with(GRID_SUFFIX));
        if path.is_file() && is_png && !is_grid {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub fid: f64,
    pub identity_mean: f64,
    /// Population standard deviation over output/bare pairs.
    pub identity_std: f64,
    pub n_images: usize,
    pub n_reference: usize,
    pub feature_embedder: String,
    pub identity_embedder: String,
    pub generated_dir: PathBuf,
    pub reference_dir: PathBuf,
    pub bare_dir: PathBuf,
    /// Generated files with no bare counterpart.
    pub excluded: Vec<String>,
}

/// Scores one directory of outputs: FID against `reference_dir` over all
/// outputs, identity against the bare image with the same sample id.
pub fn evaluate_run(
    label: &str,
    generated_dir: &Path,
    reference_dir: &Path,
    bare_dir: &Path,
    feature: &dyn Embedder,
    identity: &dyn Embedder,
) -> Result<EvalReport> {
    let generated = list_pngs(generated_dir)?;
    let reference = list_pngs(reference_dir)?;
    if generated.is_empty() {
        return Err(Error::Evaluation(format!("no PNG images in {}", generated_dir.display())));
    }
    let bare: BTreeMap<String, PathBuf> = list_pngs(bare_dir)?.into_iter().map(|p| (stem(&p), p)).collect();

    let mut pairs = Vec::new();
    let mut excluded = Vec::new();
    for path in &generated {
        let s = stem(path);
        match bare.get(sample_id(&s)) {
            Some(b) => pairs.push((path.clone(), b.clone())),
            None => excluded.push(s),
        }
    }
    if pairs.is_empty() {
        return Err(Error::Evaluation(format!(
            "none of the {} generated images has a bare counterpart in {}",
            generated.len(),
            bare_dir.display()
        )));
    }
    if !excluded.is_empty() {
        log::warn!("{label}: {} generated images have no bare counterpart and are excluded", excluded.len());
    }

    let fid = frechet_distance(&stats_of_files(&generated, feature)?, &stats_of_files(&reference, feature)?)?;

    // Several outputs usually share one bare image; embed each once.
    let bare_paths: Vec<PathBuf> = {
        let mut v: Vec<PathBuf> = pairs.iter().map(|(_, b)| b.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let bare_emb: BTreeMap<&PathBuf, Vec<f64>> =
        bare_paths.iter().zip(embed_all(&bare_paths, identity, |p| load_image(p))?).collect();
    let out_paths: Vec<PathBuf> = pairs.iter().map(|(g, _)| g.clone()).collect();
    let out_emb = embed_all(&out_paths, identity, |p| load_image(p))?;
    let sims = pairs
        .iter()
        .zip(&out_emb)
        .map(|((_, b), e)| cosine(e, &bare_emb[b]))
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&sims);

    Ok(EvalReport {
        label: label.into(),
        fid,
        identity_mean: mean,
        identity_std: std,
        n_images: generated.len(),
        n_reference: reference.len(),
        feature_embedder: feature.id(),
        identity_embedder: identity.id(),
        generated_dir: generated_dir.into(),
        reference_dir: reference_dir.into(),
        bare_dir: bare_dir.into(),
        excluded,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Comparison table, one row per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max("Method".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>14}", "Method", "FID", "Identity");
    for r in reports {
        let identity = format!("{:.2} (±{:.2})", r.identity_mean, r.identity_std);
        let _ = writeln!(out, "{:<width$}  {:>8.2}  {:>14}", r.label, r.fid, identity);
    }
    if let Some(first) = reports.first() {
        let _ = writeln!(out, "feature embedder: {}; identity embedder: {}", first.feature_embedder, first.identity_embedder);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(label: &str, fid: f64, mean: f64, std: f64) -> EvalReport {
        EvalReport {
            label: label.into(),
            fid,
            identity_mean: mean,
            identity_std: std,
            n_images: 272,
            n_reference: 272,
            feature_embedder: "inception".into(),
            identity_embedder: "arcface".into(),
            generated_dir: "g".into(),
            reference_dir: "r".into(),
            bare_dir: "b".into(),
            excluded: vec![],
        }
    }

    #[test]
    fn comparison_table_formats_fixture_rows() {
        let table = format_table(&[
            report("LaMa", 91.03, 0.33, 0.14),
            report("FcF", 40.00, 0.59, 0.14),
            report("ours", 27.26, 0.89, 0.07),
        ]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[1], "LaMa       91.03    0.33 (±0.14)");
        assert_eq!(lines[2], "FcF        40.00    0.59 (±0.14)");
        assert_eq!(lines[3], "ours       27.26    0.89 (±0.07)");
        assert!(lines[4].contains("inception") && lines[4].contains("arcface"));
    }

    #[test]
    fn sample_ids_from_output_names() {
        assert_eq!(sample_id("face_0001__s7__k2"), "face_0001");
        assert_eq!(sample_id("face_0001"), "face_0001");
        assert_eq!(sample_id("a__sx__k1"), "a__sx__k1");
        assert_eq!(sample_id("a__b__s1__k0"), "a__b");
    }

    #[test]
    fn two_values_give_hand_computed_stats() {
        let imgs = [Image::filled(2, 2, 0.0), Image::filled(2, 2, 1.0)];
        struct Mean;
        impl Embedder for Mean {
            fn id(&self) -> String {
                "mean".into()
            }
            fn embed(&self, image: &Image) -> Result<Vec<f64>> {
                Ok(vec![2.0 * image.data()[0] as f64])
            }
        }
        let s = feature_stats(&imgs, &Mean).unwrap();
        assert_eq!(s.mu[0], 1.0);
        assert_eq!(s.sigma[(0, 0)], 2.0);
        assert!(feature_stats(&imgs[..1], &Mean).is_err());
    }

    #[test]
    fn identical_images_have_zero_covariance() {
        let img = Image::from_fn(8, 8, |y, x, c| ((y + 2 * x + c) % 5) as f32 / 5.0);
        let e = ToyEmbedder::new(4, 6, 3);
        let s = feature_stats(&[img.clone(), img.clone()], &e).unwrap();
        assert!(s.sigma.iter().all(|v| *v == 0.0));
        let direct = e.embed(&img).unwrap();
        for (a, b) in s.mu.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn write(dir: &Path, name: &str, img: &Image) {
        img.save(&dir.join(name)).unwrap();
    }

    #[test]
    fn run_against_itself_and_missing_pairs() {
        let root = tempfile::tempdir().unwrap();
        let (gen, bare) = (root.path().join("gen"), root.path().join("bare"));
        std::fs::create_dir_all(&gen).unwrap();
        std::fs::create_dir_all(&bare).unwrap();
        for i in 0..6 {
            let img = Image::from_fn(16, 16, |y, x, c| (((y * 3 + x * (i + 1) + c) % 11) as f32 / 5.5) - 1.0);
            write(&gen, &format!("f{i}__s0__k0.png"), &img);
            if i < 5 {
                write(&bare, &format!("f{i}.png"), &img);
            }
        }
        write(&gen, "f0__grid.png", &Image::filled(16, 32, 0.0));
        let e = ToyEmbedder::default();
        let r = evaluate_run("self", &gen, &gen, &bare, &e, &e).unwrap();
        assert!(r.fid.abs() < 1e-3, "{}", r.fid);
        assert!((r.identity_mean - 1.0).abs() < 1e-9 && r.identity_std < 1e-6);
        assert_eq!(r.n_images, 6);
        assert_eq!(r.excluded, ["f5__s0__k0"]);

        let empty = root.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        assert!(evaluate_run("none", &gen, &gen, &empty, &e, &e).is_err());
    }
}
