//! Latent-path analysis: age traces, PCA projection, a linear age direction
//! baseline, traversal along it, and a path-nonlinearity measure.

use nalgebra::{DMatrix, DVector};

use crate::checkpoint::Checkpoint;
use crate::encoder::SamModel;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::oracles::AgePredictor;
use crate::types::{AgeYears, Image, LatentCode};

#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub target: AgeYears,
    pub code: LatentCode,
    pub predicted: AgeYears,
}

/// Codes visited by one image as its target age increases.
#[derive(Clone, Debug)]
pub struct PathTrace {
    entries: Vec<TraceEntry>,
}

impl PathTrace {
    pub fn new(entries: Vec<TraceEntry>) -> Result<Self> {
        for w in entries.windows(2) {
            if !(w[1].target.0 > w[0].target.0) {
                return Err(Error::Invalid(format!(
                    "trace targets must increase strictly ({} then {})",
                    w[0].target.0, w[1].target.0
                )));
            }
            w[0].code.check_same_shape(&w[1].code)?;
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn flat_codes(&self) -> Result<Vec<Vec<f64>>> {
        self.entries.iter().map(|e| e.code.to_vec()).collect()
    }

    /// `target_age,predicted_age,c0,c1,...` with one row per entry.
    pub fn to_csv(&self) -> Result<String> {
        let n = self.entries.first().map(|e| e.code.layers() * e.code.dim()).unwrap_or(0);
        let mut out = String::from("target_age,predicted_age");
        for i in 0..n {
            out.push_str(&format!(",c{i}"));
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("{:?},{:?}", e.target.0, e.predicted.0));
            for v in e.code.to_vec()? {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// For each target: the final latent code of the model and the predicted age of its image.
pub fn trace_age_path(
    model: &SamModel,
    predictor: &AgePredictor,
    image: &Image,
    targets: &[AgeYears],
) -> Result<PathTrace> {
    if targets.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Invalid("trace targets must be sorted ascending".into()));
    }
    let mut entries = Vec::with_capacity(targets.len());
    for &t in targets {
        let t = AgeYears::target(t.0)?;
        let code = model.transform_latent(image, t)?;
        let img = model.generator.synthesize(&code)?;
        entries.push(TraceEntry {
            target: t,
            predicted: predictor.predict_age(&img)?,
            code,
        });
    }
    PathTrace::new(entries)
}

/// Trace of `base + offset_i * direction`, labelled with the given ages.
pub fn linear_trace(
    gen: &Generator,
    predictor: &AgePredictor,
    base: &LatentCode,
    direction: &LinearDirection,
    offsets: &[f64],
    labels: &[AgeYears],
) -> Result<PathTrace> {
    if offsets.len() != labels.len() {
        return Err(Error::shape(offsets.len(), labels.len()));
    }
    let mut entries = Vec::with_capacity(offsets.len());
    for (&o, &t) in offsets.iter().zip(labels) {
        let code = direction.shift(base, o)?;
        let img = gen.synthesize(&code)?;
        entries.push(TraceEntry {
            target: t,
            predicted: predictor.predict_age(&img)?,
            code,
        });
    }
    PathTrace::new(entries)
}

/// Principal plane of one trace.
#[derive(Clone, Debug)]
pub struct PcaPlane {
    pub mean: Vec<f64>,
    /// Two unit components, ordered by explained variance.
    pub components: [Vec<f64>; 2],
    /// Sample variances (divisor `n - 1`) along each component.
    pub variances: [f64; 2],
}

impl PcaPlane {
    /// Fits the top-2 principal components of `codes` (rows).
    pub fn fit(codes: &[Vec<f64>]) -> Result<Self> {
        let n = codes.len();
        if n < 2 {
            return Err(Error::Invalid(format!("PCA needs at least 2 codes, got {n}")));
        }
        let p = codes[0].len();
        if codes.iter().any(|c| c.len() != p) {
            return Err(Error::Invalid("PCA codes differ in length".into()));
        }
        let mean: Vec<f64> = (0..p)
            .map(|j| codes.iter().map(|c| c[j]).sum::<f64>() / n as f64)
            .collect();
        let centered = DMatrix::from_fn(n, p, |i, j| codes[i][j] - mean[j]);
        let svd = centered.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Invalid("SVD failed".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let scale = mean.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
        let top = svd.singular_values[order[0]];
        if !(top > 1e-12 * scale * (n as f64).sqrt()) {
            return Err(Error::RankDeficient("all codes are identical".into()));
        }
        let comp = |k: usize| -> (Vec<f64>, f64) {
            match order.get(k) {
                Some(&i) => {
                    let mut v: Vec<f64> = vt.row(i).iter().copied().collect();
                    fix_sign(&mut v);
                    let s = svd.singular_values[i];
                    (v, s * s / (n - 1) as f64)
                }
                None => (vec![0.0; p], 0.0),
            }
        };
        let (c0, v0) = comp(0);
        let (c1, v1) = comp(1);
        Ok(Self {
            mean,
            components: [c0, c1],
            variances: [v0, v1],
        })
    }

    pub fn project(&self, code: &[f64]) -> Result<[f64; 2]> {
        if code.len() != self.mean.len() {
            return Err(Error::shape(self.mean.len(), code.len()));
        }
        let mut out = [0.0; 2];
        for (k, c) in self.components.iter().enumerate() {
            out[k] = code
                .iter()
                .zip(&self.mean)
                .zip(c)
                .map(|((x, m), v)| (x - m) * v)
                .sum();
        }
        Ok(out)
    }

    /// Point of the plane with coordinates `xy`.
    pub fn reconstruct(&self, xy: [f64; 2]) -> Vec<f64> {
        (0..self.mean.len())
            .map(|j| self.mean[j] + xy[0] * self.components[0][j] + xy[1] * self.components[1][j])
            .collect()
    }
}

/// Flips `v` so its largest-magnitude coordinate (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Fits the plane on `traces[fit_on]` and projects every entry of every trace.
pub fn pca_project(traces: &[PathTrace], fit_on: usize) -> Result<(PcaPlane, Vec<Vec<[f64; 2]>>)> {
    let fit = traces
        .get(fit_on)
        .ok_or_else(|| Error::Range(format!("trace index {fit_on} out of {}", traces.len())))?;
    let plane = PcaPlane::fit(&fit.flat_codes()?)?;
    let coords = traces
        .iter()
        .map(|t| {
            t.flat_codes()?
                .iter()
                .map(|c| plane.project(c))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((plane, coords))
}

/// `trace,index,target_age,pc1,pc2` rows for plotting.
pub fn projection_csv(traces: &[PathTrace], coords: &[Vec<[f64; 2]>]) -> String {
    let mut out = String::from("trace,index,target_age,pc1,pc2\n");
    for (t, (trace, xy)) in traces.iter().zip(coords).enumerate() {
        for (i, (e, p)) in trace.entries().iter().zip(xy).enumerate() {
            out.push_str(&format!("{t},{i},{:?},{:?},{:?}\n", e.target.0, p[0], p[1]));
        }
    }
    out
}

/// A unit direction in flattened code space with an offset: the decision
/// value of a code is `direction · code + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDirection {
    pub direction: Vec<f64>,
    pub bias: f64,
    pub layers: usize,
    pub dim: usize,
}

impl LinearDirection {
    pub fn new(direction: Vec<f64>, bias: f64, layers: usize, dim: usize) -> Result<Self> {
        if direction.len() != layers * dim {
            return Err(Error::shape(layers * dim, direction.len()));
        }
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Invalid("direction must be a non-zero finite vector".into()));
        }
        Ok(Self {
            direction: direction.iter().map(|v| v / norm).collect(),
            bias: bias / norm,
            layers,
            dim,
        })
    }

    pub fn score(&self, code: &LatentCode) -> Result<f64> {
        let v = code.to_vec()?;
        if v.len() != self.direction.len() {
            return Err(Error::shape(self.direction.len(), v.len()));
        }
        Ok(v.iter().zip(&self.direction).map(|(a, b)| a * b).sum::<f64>() + self.bias)
    }

    /// `code + amount * direction`.
    pub fn shift(&self, code: &LatentCode, amount: f64) -> Result<LatentCode> {
        let v = code.to_vec()?;
        if v.len() != self.direction.len() {
            return Err(Error::shape(self.direction.len(), v.len()));
        }
        let out = v
            .iter()
            .zip(&self.direction)
            .map(|(a, d)| a + amount * d)
            .collect();
        LatentCode::from_vec(self.layers, self.dim, out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("direction");
        c.metadata.set("layers", self.layers);
        c.metadata.set("dim", self.dim);
        c.metadata.set("bias", crate::config::fmt_f64(self.bias));
        c.insert("direction", vec![self.layers, self.dim], self.direction.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("direction")?;
        Self::new(
            c.array("direction")?.values.clone(),
            c.metadata.parse_req("bias")?,
            c.metadata.parse_req("layers")?,
            c.metadata.parse_req("dim")?,
        )
    }
}

/// Settings of the logistic-regression fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFitOptions {
    /// Ages above this count as the positive class.
    pub threshold: f64,
    /// L2 penalty on the weights in standardized coordinates.
    pub l2: f64,
    pub max_iter: usize,
}

impl Default for LinearFitOptions {
    fn default() -> Self {
        Self {
            threshold: 50.0,
            l2: 1.0,
            max_iter: 50,
        }
    }
}

/// L2-regularized logistic regression of `age > threshold` on flattened codes.
///
/// Codes are centered and divided by their global RMS first, so the result
/// does not depend on a translation or uniform scaling of the inputs.
pub fn fit_linear_direction(
    codes: &[LatentCode],
    ages: &[AgeYears],
    opts: &LinearFitOptions,
) -> Result<LinearDirection> {
    if codes.len() != ages.len() {
        return Err(Error::shape(codes.len(), ages.len()));
    }
    let labels: Vec<f64> = ages
        .iter()
        .map(|a| if a.0 > opts.threshold { 1.0 } else { 0.0 })
        .collect();
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Invalid(
            "linear fit needs ages on both sides of the threshold".into(),
        ));
    }
    let (layers, dim) = (codes[0].layers(), codes[0].dim());
    let rows = codes.iter().map(|c| c.to_vec()).collect::<Result<Vec<_>>>()?;
    let n = rows.len();
    let p = layers * dim;
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::Invalid("codes differ in shape".into()));
    }
    let mean: Vec<f64> = (0..p)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let ms = rows
        .iter()
        .flat_map(|r| r.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)))
        .sum::<f64>()
        / (n * p) as f64;
    let rms = ms.sqrt();
    if !(rms > 0.0) {
        return Err(Error::RankDeficient("all codes are identical".into()));
    }
    // Design matrix with a trailing column of ones for the intercept.
    let x = DMatrix::from_fn(n, p + 1, |i, j| {
        if j == p {
            1.0
        } else {
            (rows[i][j] - mean[j]) / rms
        }
    });
    let y = DVector::from_vec(labels);
    let mut w = DVector::zeros(p + 1);
    for _ in 0..opts.max_iter {
        let z = &x * &w;
        let prob = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        let mut grad = x.transpose() * (&prob - &y);
        let mut penalty = w.clone();
        penalty[p] = 0.0;
        grad += &penalty * opts.l2;
        let s = prob.map(|q| (q * (1.0 - q)).max(1e-12));
        let xs = DMatrix::from_fn(n, p + 1, |i, j| x[(i, j)] * s[i]);
        let mut h = x.transpose() * xs;
        for j in 0..p {
            h[(j, j)] += opts.l2;
        }
        h[(p, p)] += 1e-9;
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("singular Hessian in linear fit".into()))?;
        let delta = chol.solve(&grad);
        w -= &delta;
        if delta.amax() < 1e-10 * (1.0 + w.amax()) {
            break;
        }
    }
    // Back to original coordinates: score = (w/rms)·x + (b − w·mean/rms).
    let dir: Vec<f64> = (0..p).map(|j| w[j] / rms).collect();
    let bias = w[p] - dir.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>();
    LinearDirection::new(dir, bias, layers, dim)
}

/// Images of `code + i * stride * direction` for `i` in `-steps..=steps`.
pub fn traverse(
    gen: &Generator,
    code: &LatentCode,
    direction: &LinearDirection,
    steps: usize,
    stride: f64,
) -> Result<Vec<Image>> {
    let s = steps as i64;
    (-s..=s)
        .map(|i| gen.synthesize(&direction.shift(code, i as f64 * stride)?))
        .collect()
}

/// Largest distance of an interior code to the line through the end codes,
/// relative to the distance between the end codes.
pub fn path_nonlinearity(trace: &PathTrace) -> Result<f64> {
    if trace.len() < 3 {
        return Err(Error::Invalid(format!(
            "path nonlinearity needs at least 3 entries, got {}",
            trace.len()
        )));
    }
    points_nonlinearity(&trace.flat_codes()?)
}

/// [`path_nonlinearity`] over raw points.
pub fn points_nonlinearity(points: &[Vec<f64>]) -> Result<f64> {
    let first = &points[0];
    let last = &points[points.len() - 1];
    let chord: Vec<f64> = last.iter().zip(first).map(|(b, a)| b - a).collect();
    let len2: f64 = chord.iter().map(|v| v * v).sum();
    if !(len2 > 0.0) {
        return Err(Error::Invalid("zero-length chord".into()));
    }
    let len = len2.sqrt();
    let unit: Vec<f64> = chord.iter().map(|v| v / len).collect();
    let mut worst = 0.0f64;
    for p in &points[1..points.len() - 1] {
        let rel: Vec<f64> = p.iter().zip(first).map(|(x, a)| x - a).collect();
        let along: f64 = rel.iter().zip(&unit).map(|(r, u)| r * u).sum();
        let perp2: f64 = rel
            .iter()
            .zip(&unit)
            .map(|(r, u)| {
                let d = r - along * u;
                d * d
            })
            .sum();
        worst = worst.max(perp2.sqrt());
    }
    Ok(worst / len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn code(v: Vec<f64>) -> LatentCode {
        let n = v.len();
        LatentCode::from_vec(1, n, v).unwrap()
    }

    fn trace_of(points: Vec<Vec<f64>>) -> PathTrace {
        let entries = points
            .into_iter()
            .enumerate()
            .map(|(i, p)| TraceEntry {
                target: AgeYears(5.0 + i as f64),
                code: code(p),
                predicted: AgeYears(0.0),
            })
            .collect();
        PathTrace::new(entries).unwrap()
    }

    /// Jacobi eigenvalues of a symmetric matrix, descending.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off += a[i][j] * a[i][j];
                    }
                }
            }
            if off < 1e-22 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn pca_matches_independent_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = 6;
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..p).map(|j| rng.sample::<f64, _>(StandardNormal) * (j + 1) as f64 + i as f64).collect())
            .collect();
        let plane = PcaPlane::fit(&pts).unwrap();
        let mean: Vec<f64> = (0..p).map(|j| pts.iter().map(|r| r[j]).sum::<f64>() / 10.0).collect();
        let cov: Vec<Vec<f64>> = (0..p)
            .map(|a| {
                (0..p)
                    .map(|b| pts.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / 9.0)
                    .collect()
            })
            .collect();
        let ev = jacobi_eigenvalues(cov);
        for k in 0..2 {
            assert!((plane.variances[k] - ev[k]).abs() < 1e-8 * ev[0], "{k}");
            let proj: Vec<f64> = pts.iter().map(|r| plane.project(r).unwrap()[k]).collect();
            let var = proj.iter().map(|v| v * v).sum::<f64>() / 9.0;
            assert!((var - ev[k]).abs() < 1e-8 * ev[0]);
        }
    }

    #[test]
    fn pca_plane_points_reconstruct_and_mean_projects_to_origin() {
        let a = [1.0, 2.0, 0.0, -1.0];
        let b = [0.0, 1.0, 1.0, 3.0];
        let o = [5.0, -2.0, 1.0, 0.5];
        let pts: Vec<Vec<f64>> = [(0.0, 0.0), (1.0, 2.0), (-1.0, 0.5), (2.0, -1.0), (0.3, 0.3)]
            .iter()
            .map(|(s, t)| (0..4).map(|j| o[j] + s * a[j] + t * b[j]).collect())
            .collect();
        let plane = PcaPlane::fit(&pts).unwrap();
        for p in &pts {
            let r = plane.reconstruct(plane.project(p).unwrap());
            let err: f64 = r.iter().zip(p).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
        }
        let m = plane.project(&plane.mean).unwrap();
        assert!(m[0].abs() < 1e-12 && m[1].abs() < 1e-12);
        for c in &plane.components {
            let big = c.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn pca_is_translation_invariant_and_rejects_identical_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..8).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let shifted: Vec<Vec<f64>> = pts.iter().map(|r| r.iter().map(|v| v + 3.0).collect()).collect();
        let t1 = trace_of(pts);
        let t2 = trace_of(shifted);
        let (_, a) = pca_project(&[t1], 0).unwrap();
        let (_, b) = pca_project(&[t2], 0).unwrap();
        for (p, q) in a[0].iter().zip(&b[0]) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
        let same = trace_of(vec![vec![1.0, 2.0]; 3]);
        assert!(matches!(pca_project(&[same], 0), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn nonlinearity_of_lines_and_elbows() {
        let line = trace_of((0..5).map(|i| vec![i as f64, 2.0 * i as f64, -1.0]).collect());
        assert!(path_nonlinearity(&line).unwrap() < 1e-12);
        let elbow = trace_of(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        // distance of (1,0) to the diagonal is 1/sqrt(2); the chord is sqrt(2)
        let expected = (0.5f64).sqrt() / 2f64.sqrt();
        assert!((path_nonlinearity(&elbow).unwrap() - expected).abs() < 1e-12);
        let short = trace_of(vec![vec![0.0], vec![1.0]]);
        assert!(path_nonlinearity(&short).is_err());
        let closed = trace_of(vec![vec![0.0], vec![1.0], vec![0.0]]);
        assert!(path_nonlinearity(&closed).is_err());
    }

    #[test]
    fn trace_requires_increasing_targets() {
        let e = |t: f64| TraceEntry {
            target: AgeYears(t),
            code: code(vec![0.0]),
            predicted: AgeYears(t),
        };
        assert!(PathTrace::new(vec![e(10.0), e(10.0)]).is_err());
        assert!(PathTrace::new(vec![e(10.0), e(20.0)]).is_ok());
    }

    fn synthetic(n: usize, p: usize, seed: u64, v: &[f64], noise: f64) -> (Vec<LatentCode>, Vec<AgeYears>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes = Vec::new();
        let mut ages = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let s: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
            ages.push(AgeYears(50.0 + 20.0 * s + noise * rng.sample::<f64, _>(StandardNormal)));
            codes.push(LatentCode::from_vec(4, p / 4, x).unwrap());
        }
        (codes, ages)
    }

    #[test]
    fn planted_direction_is_recovered() {
        let p = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        let (codes, ages) = synthetic(800, p, 10, &v, 1.0);
        let d = fit_linear_direction(&codes, &ages, &LinearFitOptions::default()).unwrap();
        let cos: f64 = d.direction.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!(cos.abs() >= 0.95, "{cos}");
    }

    #[test]
    fn axis_aligned_clusters_give_the_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (p, k) = (8, 3);
        let mut codes = Vec::new();
        let mut ages = Vec::new();
        for _ in 0..20 {
            let mut base: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            base[k] = 0.0;
            for (sign, age) in [(-1.0, 20.0), (1.0, 80.0)] {
                let mut x = base.clone();
                x[k] += sign * 3.0;
                codes.push(LatentCode::from_vec(2, 4, x).unwrap());
                ages.push(AgeYears(age));
            }
        }
        let d = fit_linear_direction(&codes, &ages, &LinearFitOptions::default()).unwrap();
        for (j, v) in d.direction.iter().enumerate() {
            let want = if j == k { 1.0 } else { 0.0 };
            assert!((v.abs() - want).abs() < 1e-3, "{j}: {v}");
        }
        let flipped: Vec<AgeYears> = ages.iter().map(|a| AgeYears(100.0 - a.0)).collect();
        let e = fit_linear_direction(&codes, &flipped, &LinearFitOptions::default()).unwrap();
        for (a, b) in d.direction.iter().zip(&e.direction) {
            assert!((a + b).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_fit_is_scale_invariant_and_rejects_one_class() {
        let p = 16;
        let v: Vec<f64> = (0..p).map(|j| if j == 2 { 1.0 } else { 0.0 }).collect();
        let (codes, ages) = synthetic(100, p, 12, &v, 2.0);
        let scaled: Vec<LatentCode> = codes
            .iter()
            .map(|c| LatentCode::from_vec(4, 4, c.to_vec().unwrap().iter().map(|x| x * 7.5).collect()).unwrap())
            .collect();
        let a = fit_linear_direction(&codes, &ages, &LinearFitOptions::default()).unwrap();
        let b = fit_linear_direction(&scaled, &ages, &LinearFitOptions::default()).unwrap();
        for (x, y) in a.direction.iter().zip(&b.direction) {
            assert!((x - y).abs() < 1e-9);
        }
        let old = vec![AgeYears(70.0); codes.len()];
        assert!(fit_linear_direction(&codes, &old, &LinearFitOptions::default()).is_err());
    }

    #[test]
    fn direction_round_trips_and_shifts_reflect() {
        let d = LinearDirection::new(vec![3.0, 4.0], 1.0, 1, 2).unwrap();
        assert!((d.direction[0] - 0.6).abs() < 1e-15);
        let back = LinearDirection::from_checkpoint(&d.to_checkpoint()).unwrap();
        assert_eq!(back, d);
        let c = code(vec![1.0, 1.0]);
        let up = d.shift(&c, 2.0).unwrap().to_vec().unwrap();
        let down = d.shift(&c, -2.0).unwrap().to_vec().unwrap();
        for j in 0..2 {
            assert!(((up[j] + down[j]) / 2.0 - 1.0).abs() < 1e-15);
        }
    }
}
