//! The 2D two-spiral disentanglement demo: data generation, noisy-pair
//! construction, the end-to-end solve, and CSV/SVG emission.

use std::io::Write;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dictionary::{kmeans_fit, Dictionary};
use crate::error::{Result, SmtError};
use crate::evaluation::{knn_accuracy, KnnConfig};
use crate::smt_core::{solve_embedding, AccumulationMode, CooccurrenceStats};
use crate::sparse::encode_vq;

/// Two entangled Archimedean spirals in the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiralDataset {
    /// `(n, 2)` point coordinates.
    pub points: Array2<f64>,
    /// Arm membership, 0 or 1.
    pub manifold_id: Vec<u8>,
    /// Position along the arm in `[0, 1]`, monotone along each arm.
    pub arc_param: Vec<f64>,
}

impl SpiralDataset {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const INNER_RADIUS: f64 = 0.5;
const RADIUS_SLOPE: f64 = 0.4;

/// Two Archimedean spirals `r = 0.5 + 0.4 theta` with the second arm rotated
/// by pi, `theta` sweeping `turns` full rotations, with optional radial
/// Gaussian jitter.
pub fn generate_spirals(
    n_per_arm: usize,
    turns: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<SpiralDataset> {
    if n_per_arm < 2 {
        return Err(SmtError::InvalidArgument("need at least 2 points per arm".into()));
    }
    if !(turns > 0.0) || noise_sd < 0.0 {
        return Err(SmtError::InvalidArgument(format!(
            "bad spiral geometry: turns={turns}, noise_sd={noise_sd}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| SmtError::InvalidArgument(e.to_string()))?;
    let n = 2 * n_per_arm;
    let mut points = Array2::zeros((n, 2));
    let mut manifold_id = Vec::with_capacity(n);
    let mut arc_param = Vec::with_capacity(n);
    for arm in 0..2u8 {
        for i in 0..n_per_arm {
            let t = i as f64 / (n_per_arm - 1) as f64;
            let theta = t * turns * std::f64::consts::TAU;
            let mut r = INNER_RADIUS + RADIUS_SLOPE * theta;
            if noise_sd > 0.0 {
                r += noise_sd * normal.sample(&mut rng);
            }
            let (sin, cos) = theta.sin_cos();
            // the second arm is the first rotated by pi
            let sign = if arm == 0 { 1.0 } else { -1.0 };
            let row = arm as usize * n_per_arm + i;
            points[[row, 0]] = sign * r * cos;
            points[[row, 1]] = sign * r * sin;
            manifold_id.push(arm);
            arc_param.push(t);
        }
    }
    Ok(SpiralDataset {
        points,
        manifold_id,
        arc_param,
    })
}

/// Two independent isotropic Gaussian perturbations of the same base point.
pub fn noisy_pair(x: (f64, f64), sigma: f64, rng: &mut ChaCha8Rng) -> ((f64, f64), (f64, f64)) {
    if sigma == 0.0 {
        return (x, x);
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let a = (x.0 + normal.sample(rng), x.1 + normal.sample(rng));
    let b = (x.0 + normal.sample(rng), x.1 + normal.sample(rng));
    (a, b)
}

/// Median nearest-neighbor spacing among dictionary landmarks.
fn median_landmark_spacing(dict: &Dictionary) -> f64 {
    let k = dict.k();
    let mut nearest = Vec::with_capacity(k);
    for i in 0..k {
        let mut best = f64::INFINITY;
        for j in 0..k {
            if i != j {
                let d = &dict.elements.row(i) - &dict.elements.row(j);
                best = best.min(d.dot(&d).sqrt());
            }
        }
        nearest.push(best);
    }
    nearest.sort_by(|a, b| a.total_cmp(b));
    nearest[k / 2]
}

/// Euclidean vs embedding-cosine neighborhood of one probe point.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodComparison {
    pub probe_index: usize,
    /// (point index, euclidean distance), ascending.
    pub euclidean: Vec<(usize, f64)>,
    /// (point index, embedding cosine), descending.
    pub embedding: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct SpiralReport {
    pub dataset: SpiralDataset,
    pub landmarks: Array2<f64>,
    /// Majority training arm per landmark.
    pub landmark_arm: Vec<u8>,
    /// `(K, d_emb)`: embedding values at each landmark (columns of `P`).
    pub landmark_values: Array2<f64>,
    /// `(n, d_emb)`: embedding of every training point.
    pub point_embeddings: Array2<f64>,
    pub eigenvalues: Vec<f64>,
    pub holdout: SpiralDataset,
    pub holdout_embeddings: Array2<f64>,
    /// 1-NN (cosine) arm classification accuracy on the holdout set.
    pub holdout_arm_accuracy: f64,
    pub within_arm_mean_cosine: f64,
    pub cross_arm_mean_cosine: f64,
    pub sigma: f64,
    pub probe: NeighborhoodComparison,
}

#[derive(Debug, Clone, Copy)]
pub struct SpiralParams {
    pub n_per_arm: usize,
    pub turns: f64,
    pub data_noise_sd: f64,
    pub landmarks: usize,
    /// Pair noise scale; `None` picks 0.5 x median nearest-landmark spacing.
    pub sigma: Option<f64>,
    pub d_emb: usize,
    pub pairs_per_point: usize,
    pub holdout_per_arm: usize,
    pub seed: u64,
}

impl Default for SpiralParams {
    fn default() -> Self {
        SpiralParams {
            n_per_arm: 2000,
            turns: 1.5,
            data_noise_sd: 0.0,
            landmarks: 400,
            sigma: None,
            d_emb: 4,
            pairs_per_point: 4,
            holdout_per_arm: 500,
            seed: 17,
        }
    }
}

fn embed_points(
    points: &Array2<f64>,
    dict: &Dictionary,
    proj: &Array2<f64>,
) -> Result<Array2<f64>> {
    let d_emb = proj.nrows();
    let mut out = Array2::zeros((points.nrows(), d_emb));
    for (i, p) in points.rows().into_iter().enumerate() {
        let code = encode_vq(p, dict)?;
        let idx = code.entries[0].0 as usize;
        out.row_mut(i).assign(&proj.column(idx));
    }
    Ok(out)
}

/// Fit landmarks, accumulate noisy pairs, solve for the projection, and
/// evaluate arm separation on held-out points.
pub fn run_spiral_smt(params: &SpiralParams) -> Result<SpiralReport> {
    let dataset = generate_spirals(
        params.n_per_arm,
        params.turns,
        params.data_noise_sd,
        params.seed,
    )?;
    if params.landmarks > dataset.len() {
        return Err(SmtError::InvalidArgument(format!(
            "{} landmarks from {} points",
            params.landmarks,
            dataset.len()
        )));
    }
    let (dict, _) = kmeans_fit(
        dataset.points.view(),
        params.landmarks,
        false,
        30,
        0.5,
        params.seed ^ 0x6b6d,
    )?;
    let sigma = params.sigma.unwrap_or_else(|| 0.5 * median_landmark_spacing(&dict));

    // noisy-pair statistics over the training points
    let k = dict.k();
    let mut stats = CooccurrenceStats::new(k, AccumulationMode::Pairwise);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x7061_6972);
    let mut assignments: Vec<u32> = Vec::with_capacity(dataset.len());
    for row in dataset.points.rows() {
        assignments.push(encode_vq(row, &dict)?.entries[0].0);
    }
    for i in 0..dataset.len() {
        let base = (dataset.points[[i, 0]], dataset.points[[i, 1]]);
        for _ in 0..params.pairs_per_point {
            let (p1, p2) = noisy_pair(base, sigma, &mut rng);
            let a = encode_vq(Array1::from_vec(vec![p1.0, p1.1]).view(), &dict)?;
            let b = encode_vq(Array1::from_vec(vec![p2.0, p2.1]).view(), &dict)?;
            stats.accumulate_pair(&a, &b)?;
        }
    }
    let embedding = solve_embedding(&stats, params.d_emb, 0, 1e-7)?;

    // majority arm per landmark
    let mut arm_votes = vec![[0u32; 2]; k];
    for (i, &a) in assignments.iter().enumerate() {
        arm_votes[a as usize][dataset.manifold_id[i] as usize] += 1;
    }
    let landmark_arm: Vec<u8> = arm_votes
        .iter()
        .map(|v| if v[1] > v[0] { 1 } else { 0 })
        .collect();

    let point_embeddings = embed_points(&dataset.points, &dict, &embedding.projection)?;

    // held-out evaluation
    let holdout = generate_spirals(
        params.holdout_per_arm,
        params.turns,
        params.data_noise_sd,
        params.seed ^ 0x686f_6c64,
    )?;
    let holdout_embeddings = embed_points(&holdout.points, &dict, &embedding.projection)?;
    let train32 = point_embeddings.mapv(|v| v as f32);
    let hold32 = holdout_embeddings.mapv(|v| v as f32);
    let holdout_arm_accuracy = knn_accuracy(
        train32.view(),
        &dataset.manifold_id,
        hold32.view(),
        &holdout.manifold_id,
        &KnnConfig {
            k: 1,
            temperature: 0.07,
        },
    )?;

    // mean within- and cross-arm embedding cosines over the holdout set
    let mut within = (0.0f64, 0u64);
    let mut cross = (0.0f64, 0u64);
    let norms: Vec<f64> = holdout_embeddings
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    for i in 0..holdout.len() {
        if norms[i] <= 0.0 {
            continue;
        }
        for j in (i + 1)..holdout.len() {
            if norms[j] <= 0.0 {
                continue;
            }
            let cos = holdout_embeddings.row(i).dot(&holdout_embeddings.row(j))
                / (norms[i] * norms[j]);
            if holdout.manifold_id[i] == holdout.manifold_id[j] {
                within.0 += cos;
                within.1 += 1;
            } else {
                cross.0 += cos;
                cross.1 += 1;
            }
        }
    }

    // probe neighborhoods: a point midway along arm 0
    let probe_index = params.n_per_arm / 2;
    let probe = {
        let px = dataset.points.row(probe_index).to_owned();
        let mut euclidean: Vec<(usize, f64)> = dataset
            .points
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != probe_index)
            .map(|(i, r)| {
                let d = &r - &px;
                (i, d.dot(&d).sqrt())
            })
            .collect();
        euclidean.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        euclidean.truncate(50);

        let pe = point_embeddings.row(probe_index).to_owned();
        let pn = pe.dot(&pe).sqrt();
        let mut by_cos: Vec<(usize, f64)> = point_embeddings
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != probe_index)
            .map(|(i, r)| {
                let n = r.dot(&r).sqrt();
                let cos = if n > 0.0 && pn > 0.0 {
                    r.dot(&pe) / (n * pn)
                } else {
                    0.0
                };
                (i, cos)
            })
            .collect();
        by_cos.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        by_cos.truncate(50);
        NeighborhoodComparison {
            probe_index,
            euclidean,
            embedding: by_cos,
        }
    };

    Ok(SpiralReport {
        dataset,
        landmarks: dict.elements,
        landmark_arm,
        landmark_values: embedding.projection.t().to_owned(),
        point_embeddings,
        eigenvalues: embedding.eigenvalues,
        holdout,
        holdout_embeddings,
        holdout_arm_accuracy,
        within_arm_mean_cosine: within.0 / within.1.max(1) as f64,
        cross_arm_mean_cosine: cross.0 / cross.1.max(1) as f64,
        sigma,
        probe,
    })
}

/// `x,y,arm,beta1..betaD` rows for the training points.
pub fn write_embedding_csv<W: Write>(report: &SpiralReport, mut w: W) -> Result<()> {
    let io_err = |e: std::io::Error| SmtError::io("<spiral csv>", e);
    let d = report.point_embeddings.ncols();
    write!(w, "x,y,arm").map_err(io_err)?;
    for j in 1..=d {
        write!(w, ",beta{j}").map_err(io_err)?;
    }
    writeln!(w).map_err(io_err)?;
    for i in 0..report.dataset.len() {
        write!(
            w,
            "{},{},{}",
            report.dataset.points[[i, 0]],
            report.dataset.points[[i, 1]],
            report.dataset.manifold_id[i]
        )
        .map_err(io_err)?;
        for j in 0..d {
            write!(w, ",{}", report.point_embeddings[[i, j]]).map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    Ok(())
}

/// `rank,euclidean_index,euclidean_distance,embedding_index,embedding_cosine`
/// rows comparing the probe's two neighborhoods.
pub fn write_neighborhood_csv<W: Write>(report: &SpiralReport, mut w: W) -> Result<()> {
    let io_err = |e: std::io::Error| SmtError::io("<spiral csv>", e);
    writeln!(
        w,
        "rank,euclidean_index,euclidean_distance,embedding_index,embedding_cosine"
    )
    .map_err(io_err)?;
    let n = report.probe.euclidean.len().min(report.probe.embedding.len());
    for r in 0..n {
        let (ei, ed) = report.probe.euclidean[r];
        let (bi, bc) = report.probe.embedding[r];
        writeln!(w, "{},{},{},{},{}", r + 1, ei, ed, bi, bc).map_err(io_err)?;
    }
    Ok(())
}

/// Minimal SVG scatter of the training points colored by one embedding
/// dimension (blue negative, red positive).
pub fn write_svg_scatter<W: Write>(report: &SpiralReport, dim: usize, mut w: W) -> Result<()> {
    let io_err = |e: std::io::Error| SmtError::io("<spiral svg>", e);
    if dim >= report.point_embeddings.ncols() {
        return Err(SmtError::InvalidArgument(format!(
            "dimension {dim} out of range"
        )));
    }
    let pts = &report.dataset.points;
    let (mut min_x, mut max_x, mut min_y, mut max_y) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in pts.rows() {
        min_x = min_x.min(r[0]);
        max_x = max_x.max(r[0]);
        min_y = min_y.min(r[1]);
        max_y = max_y.max(r[1]);
    }
    let vmax = report
        .point_embeddings
        .column(dim)
        .iter()
        .fold(0.0f64, |a, &b| a.max(b.abs()))
        .max(1e-12);
    let size = 600.0;
    let pad = 20.0;
    let scale = (size - 2.0 * pad) / (max_x - min_x).max(max_y - min_y).max(1e-12);
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )
    .map_err(io_err)?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#).map_err(io_err)?;
    for (i, r) in pts.rows().into_iter().enumerate() {
        let x = pad + (r[0] - min_x) * scale;
        let y = size - pad - (r[1] - min_y) * scale;
        let v = report.point_embeddings[[i, dim]] / vmax; // [-1, 1]
        let red = (127.0 + 127.0 * v).round().clamp(0.0, 255.0) as u8;
        let blue = (127.0 - 127.0 * v).round().clamp(0.0, 255.0) as u8;
        writeln!(
            w,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="rgb({red},64,{blue})"/>"##
        )
        .map_err(io_err)?;
    }
    writeln!(w, "</svg>").map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_origin_and_rotation_symmetry() {
        let ds = generate_spirals(50, 1.5, 0.0, 3).unwrap();
        // arc 0 of arm 0 sits at (inner radius, 0)
        approx::assert_abs_diff_eq!(ds.points[[0, 0]], INNER_RADIUS, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(ds.points[[0, 1]], 0.0, epsilon = 1e-12);
        // arm 1 is arm 0 rotated by pi
        for i in 0..50 {
            approx::assert_abs_diff_eq!(ds.points[[50 + i, 0]], -ds.points[[i, 0]], epsilon = 1e-12);
            approx::assert_abs_diff_eq!(ds.points[[50 + i, 1]], -ds.points[[i, 1]], epsilon = 1e-12);
        }
        // arc_param monotone along each arm
        for arm in 0..2 {
            for i in 1..50 {
                assert!(ds.arc_param[arm * 50 + i] > ds.arc_param[arm * 50 + i - 1]);
            }
        }
    }

    #[test]
    fn arms_are_separated_for_default_geometry() {
        let ds = generate_spirals(400, 1.5, 0.0, 1).unwrap();
        let mut min_gap = f64::INFINITY;
        for i in 0..400 {
            for j in 400..800 {
                let dx = ds.points[[i, 0]] - ds.points[[j, 0]];
                let dy = ds.points[[i, 1]] - ds.points[[j, 1]];
                min_gap = min_gap.min((dx * dx + dy * dy).sqrt());
            }
        }
        assert!(min_gap > 0.5, "inter-arm gap {min_gap}");
    }

    #[test]
    fn noisy_pair_zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = noisy_pair((1.5, -0.5), 0.0, &mut rng);
        assert_eq!(a, (1.5, -0.5));
        assert_eq!(b, (1.5, -0.5));
    }

    #[test]
    fn noisy_pair_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(noisy_pair((0.0, 0.0), 0.3, &mut r1), noisy_pair((0.0, 0.0), 0.3, &mut r2));
    }

    #[test]
    fn pair_difference_covariance_monte_carlo() {
        // difference of two independent N(0, sigma^2 I) perturbations has
        // covariance 2 sigma^2 I
        let sigma = 0.7;
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (a, b) = noisy_pair((2.0, -1.0), sigma, &mut rng);
            let (dx, dy) = (a.0 - b.0, a.1 - b.1);
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        let expect = 2.0 * sigma * sigma;
        // 3 sigma bounds for the variance of a chi-squared style estimate
        let tol = 3.0 * expect * (2.0 / n as f64).sqrt();
        assert!((sxx / n as f64 - expect).abs() < tol);
        assert!((syy / n as f64 - expect).abs() < tol);
        assert!((sxy / n as f64).abs() < tol);
    }

    fn small_params() -> SpiralParams {
        SpiralParams {
            n_per_arm: 800,
            landmarks: 300,
            holdout_per_arm: 200,
            pairs_per_point: 6,
            seed: 11,
            ..SpiralParams::default()
        }
    }

    #[test]
    fn spiral_smt_separates_arms() {
        let report = run_spiral_smt(&small_params()).unwrap();
        assert!(
            report.within_arm_mean_cosine > report.cross_arm_mean_cosine,
            "within {} vs cross {}",
            report.within_arm_mean_cosine,
            report.cross_arm_mean_cosine
        );
        assert_eq!(report.holdout_arm_accuracy, 1.0);
        // eigenvalues ascend
        for w in report.eigenvalues.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        // all finite
        assert!(report.point_embeddings.iter().all(|v| v.is_finite()));
        assert!(report.landmark_values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn leading_dimension_is_piecewise_constant_across_arms() {
        let report = run_spiral_smt(&small_params()).unwrap();
        // one of the first two dimensions is near-constant within each arm
        let mut found = false;
        for dim in 0..2 {
            let mut stats = [(0.0f64, 0.0f64, 0u32); 2]; // sum, sumsq, n per arm
            for (i, &arm) in report.landmark_arm.iter().enumerate() {
                let v = report.landmark_values[[i, dim]];
                let s = &mut stats[arm as usize];
                s.0 += v;
                s.1 += v * v;
                s.2 += 1;
            }
            let mean = |s: (f64, f64, u32)| s.0 / s.2.max(1) as f64;
            let sd = |s: (f64, f64, u32)| {
                let m = mean(s);
                ((s.1 / s.2.max(1) as f64) - m * m).max(0.0).sqrt()
            };
            let gap = (mean(stats[0]) - mean(stats[1])).abs();
            let spread = sd(stats[0]).max(sd(stats[1]));
            if gap > 0.0 && spread < 0.2 * gap {
                found = true;
                break;
            }
        }
        assert!(found, "no piecewise-constant arm-separating dimension in the first two");
    }

    #[test]
    fn reports_are_bit_identical_across_runs() {
        let a = run_spiral_smt(&small_params()).unwrap();
        let b = run_spiral_smt(&small_params()).unwrap();
        assert_eq!(a.point_embeddings, b.point_embeddings);
        assert_eq!(a.eigenvalues, b.eigenvalues);
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        write_embedding_csv(&a, &mut csv_a).unwrap();
        write_embedding_csv(&b, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn csv_and_svg_emission_wellformed() {
        let report = run_spiral_smt(&SpiralParams {
            n_per_arm: 60,
            landmarks: 30,
            holdout_per_arm: 20,
            ..small_params()
        })
        .unwrap();
        let mut csv = Vec::new();
        write_embedding_csv(&report, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x,y,arm,beta1,beta2,beta3,beta4");
        assert_eq!(lines.count(), report.dataset.len());

        let mut ncsv = Vec::new();
        write_neighborhood_csv(&report, &mut ncsv).unwrap();
        assert!(ncsv.starts_with(b"rank,"));

        let mut svg = Vec::new();
        write_svg_scatter(&report, 0, &mut svg).unwrap();
        let s = String::from_utf8(svg).unwrap();
        assert!(s.starts_with("<svg"));
        assert!(s.trim_end().ends_with("</svg>"));
        assert!(s.matches("<circle").count() == report.dataset.len());
        assert!(write_svg_scatter(&report, 99, &mut Vec::new()).is_err());
    }
}
