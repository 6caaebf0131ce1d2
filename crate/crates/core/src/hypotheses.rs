//! Sampling-based auditing of the structural hypotheses.
//!
//! Boundedness and Lipschitz checks are run on a margin refinement schedule
//! and judged by how their suprema move as samples approach the boundary.
//! Every check is deterministic in `(model, samples, seed)`: samples are
//! evaluated in parallel but reduced sequentially in index order.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::{g_matrix, project_l, projector_l};
use crate::models::CrossDiffusionModel;
use crate::simplex::{AugmentedComposition, Composition};

/// Margins of the refinement schedule.
pub const REFINEMENT_MARGINS: [f64; 3] = [1e-2, 1e-4, 1e-6];
/// Margin for the single-level checks.
pub const CHECK_MARGIN: f64 = 1e-6;
/// Share of samples drawn from a boundary layer by the checkers.
pub const CHECK_BOUNDARY_FRACTION: f64 = 0.5;
/// Ratios with a smaller denominator are skipped.
pub const DENOMINATOR_GUARD: f64 = 1e-14;
/// Relative slack allowed on sampled inequalities.
pub const INEQUALITY_SLACK: f64 = 1e-9;
/// Tolerance of the commutation identity, relative to `1 + |G|_inf`.
pub const GPL_TOLERANCE: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hypothesis {
    H3,
    H4i,
    H4ii,
    H5,
    H5prime,
    LemG,
    #[serde(rename = "GPL")]
    Gpl,
    Reaction,
    IonLemma,
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::H3 => "H3",
            Self::H4i => "H4i",
            Self::H4ii => "H4ii",
            Self::H5 => "H5",
            Self::H5prime => "H5prime",
            Self::LemG => "LemG",
            Self::Gpl => "GPL",
            Self::Reaction => "Reaction",
            Self::IonLemma => "IonLemma",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pass => "PASS",
            Self::Fail => "FAIL",
            Self::Inconclusive => "INCONCLUSIVE",
        })
    }
}

/// The sample behind an extremal statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// Augmented points `(u_0, ..., u_n)`; two of them for pair checks.
    pub points: Vec<Vec<f64>>,
    /// Probe vector, where the check uses one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<Vec<f64>>,
    /// Matrix entry responsible, where the check is entrywise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entry: Option<(usize, usize)>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub margin: f64,
    /// Supremum over this margin and all coarser ones.
    pub supremum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub hypothesis: Hypothesis,
    pub model: String,
    pub verdict: Verdict,
    pub statistic: f64,
    pub witness: Option<Witness>,
    pub samples: usize,
    pub margin: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub refinement: Vec<RefinementLevel>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub details: BTreeMap<String, f64>,
}

impl HypothesisReport {
    /// Sampled positivity constant with the relative slack applied; only
    /// meaningful for [`Hypothesis::H3`] reports.
    pub fn empirical_constant(&self) -> f64 {
        self.statistic * (1.0 - INEQUALITY_SLACK)
    }
}

/// Seeded sampler on the augmented simplex with every entry `>= margin`.
///
/// Sample `k` is drawn from its own ChaCha stream, so any sample can be
/// regenerated in isolation and samplers that differ only in the margin see
/// the same underlying random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplexSampler {
    pub n: usize,
    pub margin: f64,
    pub seed: u64,
    /// Probability that a sample is drawn from a boundary layer instead of
    /// uniformly.
    pub boundary_fraction: f64,
}

impl SimplexSampler {
    pub fn new(n: usize, margin: f64, seed: u64) -> Result<Self> {
        let components = n + 1;
        if n == 0 || !(0.0..0.49).contains(&margin) || margin * components as f64 >= 1.0 {
            return Err(Error::SamplerExhausted { margin, components });
        }
        Ok(Self {
            n,
            margin,
            seed,
            boundary_fraction: 0.0,
        })
    }

    pub fn with_boundary_fraction(mut self, fraction: f64) -> Self {
        self.boundary_fraction = fraction.clamp(0.0, 1.0);
        self
    }

    /// Checker default: margin `CHECK_MARGIN` and a boundary layer.
    pub fn for_checks(n: usize, margin: f64, seed: u64) -> Result<Self> {
        Ok(Self::new(n, margin, seed)?.with_boundary_fraction(CHECK_BOUNDARY_FRACTION))
    }

    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    pub fn sample(&self, index: u64) -> AugmentedComposition {
        let mut rng = self.rng(index);
        self.draw(&mut rng)
    }

    /// Draws one augmented point from `rng`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentedComposition {
        let m = self.n + 1;
        let layer: f64 = rng.random();
        let values = if layer < self.boundary_fraction && self.margin > 0.0 {
            self.draw_layer(rng, m)
        } else {
            uniform_above(rng, m, self.margin, 1.0)
        };
        AugmentedComposition::new(values).expect("sampler produced a simplex point")
    }

    /// A random nonempty proper subset of entries sits in `[margin, 10 margin]`
    /// (log-uniform), the rest is uniform on what remains.
    fn draw_layer<R: Rng + ?Sized>(&self, rng: &mut R, m: usize) -> Vec<f64> {
        let full = (1u64 << m) - 1;
        let mask = loop {
            let mask = rng.random_range(1..full);
            if mask != 0 {
                break mask;
            }
        };
        let mut values = vec![0.0; m];
        let mut used = 0.0;
        for (i, v) in values.iter_mut().enumerate() {
            if mask >> i & 1 == 1 {
                let e: f64 = rng.random();
                *v = self.margin * 10f64.powf(e);
                used += *v;
            }
        }
        let rest: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 0).collect();
        let remaining = 1.0 - used;
        if remaining - rest.len() as f64 * self.margin <= 0.0 {
            return uniform_above(rng, m, self.margin, 1.0);
        }
        let fill = uniform_above(rng, rest.len(), self.margin, remaining);
        for (i, v) in rest.into_iter().zip(fill) {
            values[i] = v;
        }
        values
    }

    pub fn sample_simplex(&self, count: usize) -> Result<Vec<AugmentedComposition>> {
        if count == 0 {
            return Err(Error::InvalidParameter("sample count must be positive".into()));
        }
        Ok((0..count as u64).map(|k| self.sample(k)).collect())
    }

    /// A pair of nearby-or-independent points for Lipschitz-type ratios.
    ///
    /// One in three pairs is independent; the others move mass between one
    /// entry (scaled by a factor in `[0.1, 10]`) and the largest other entry.
    pub fn pair(&self, index: u64) -> (AugmentedComposition, AugmentedComposition) {
        let mut rng = self.rng(index);
        let u = self.draw(&mut rng);
        if index.is_multiple_of(3) {
            let v = self.draw(&mut rng);
            return (u, v);
        }
        let mut v = u.values().to_vec();
        let m = v.len();
        let k = rng.random_range(0..m);
        let e: f64 = rng.random_range(-1.0..1.0);
        let target = (v[k] * 10f64.powf(e)).max(self.margin);
        let c = (0..m)
            .filter(|&j| j != k)
            .max_by(|&a, &b| v[a].total_cmp(&v[b]))
            .expect("at least two components");
        let delta = (target - v[k]).min(v[c] - self.margin);
        v[k] += delta;
        v[c] -= delta;
        let v = AugmentedComposition::new(v).expect("transfer keeps the simplex");
        (u, v)
    }
}

/// `m` values `>= margin` summing to `total`, uniform on that set.
fn uniform_above<R: Rng + ?Sized>(rng: &mut R, m: usize, margin: f64, total: f64) -> Vec<f64> {
    let e: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = e.iter().sum();
    let free = total - m as f64 * margin;
    e.into_iter().map(|x| margin + free * x / sum).collect()
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, m: usize) -> DVector<f64> {
    DVector::from_fn(m, |_, _| StandardNormal.sample(rng))
}

/// Verdict from cumulative suprema at the three refinement margins: stable
/// when the spread is within 10% of the largest value, divergent when each
/// refinement grows the supremum more than tenfold.
pub fn refinement_verdict(sups: &[f64]) -> Verdict {
    let (s1, s2, s3) = (sups[0], sups[1], sups[2]);
    if sups.iter().any(|s| s.is_nan()) {
        return Verdict::Inconclusive;
    }
    if s3.is_infinite() {
        return Verdict::Fail;
    }
    if s3 - s1 <= 0.1 * s3 {
        Verdict::Pass
    } else if s2 > 10.0 * s1 && s3 > 10.0 * s2 {
        Verdict::Fail
    } else {
        Verdict::Inconclusive
    }
}

/// Per-sample extremal value used by the sup-type checks.
#[derive(Debug, Clone)]
struct Extremum {
    value: f64,
    witness: Witness,
}

fn reduce_max(items: Vec<Option<Extremum>>) -> (Option<Extremum>, usize) {
    let mut best: Option<Extremum> = None;
    let mut skipped = 0;
    for item in items {
        match item {
            None => skipped += 1,
            Some(e) => {
                // NaN sorts above everything so that it surfaces.
                let better = match &best {
                    None => true,
                    Some(b) => e.value.is_nan() || (!b.value.is_nan() && e.value > b.value),
                };
                if better {
                    best = Some(e);
                }
            }
        }
    }
    (best, skipped)
}

fn run_refinement<F>(
    hypothesis: Hypothesis,
    m: &dyn CrossDiffusionModel,
    samples: usize,
    seed: u64,
    floor: f64,
    eval: F,
) -> Result<HypothesisReport>
where
    F: Fn(&SimplexSampler, u64) -> Option<Extremum> + Sync,
{
    let mut refinement = Vec::new();
    let mut overall: Option<Extremum> = None;
    let mut cumulative = floor;
    let mut skipped = 0;
    for &margin in &REFINEMENT_MARGINS {
        let sampler = SimplexSampler::for_checks(m.species(), margin, seed)?;
        let items: Vec<Option<Extremum>> = (0..samples as u64).into_par_iter().map(|k| eval(&sampler, k)).collect();
        let (best, sk) = reduce_max(items);
        skipped += sk;
        if let Some(b) = best {
            if b.value.is_nan() || b.value > cumulative {
                cumulative = b.value;
                overall = Some(b);
            }
        }
        refinement.push(RefinementLevel {
            margin,
            supremum: cumulative,
        });
    }
    let sups: Vec<f64> = refinement.iter().map(|r| r.supremum).collect();
    let mut details = BTreeMap::new();
    details.insert("skipped".to_string(), skipped as f64);
    Ok(HypothesisReport {
        hypothesis,
        model: m.name().to_string(),
        verdict: refinement_verdict(&sups),
        statistic: cumulative,
        witness: overall.map(|e| e.witness),
        samples,
        margin: REFINEMENT_MARGINS[2],
        seed,
        refinement,
        details,
    })
}

fn point(ac: &AugmentedComposition) -> Vec<f64> {
    ac.values().to_vec()
}

/// Positivity of `h''A` in the weighted norm `sum u_i^{2s-2} z_i^2`.
///
/// The infimum over `z` at each sampled point is computed exactly as the
/// smallest eigenvalue of the symmetrized `S h''A S`, `S = diag(u^{1-s})`.
pub fn check_h3(m: &dyn CrossDiffusionModel, samples: usize, seed: u64) -> Result<HypothesisReport> {
    let sampler = SimplexSampler::for_checks(m.species(), CHECK_MARGIN, seed)?;
    let s = m.entropy_exponent();
    let items: Vec<Option<Extremum>> = (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let ac = sampler.sample(k);
            let c = ac.composition();
            let d = m.hessian_diffusion(&c).ok()?;
            let scale: Vec<f64> = c.fractions().iter().map(|u| u.powf(1.0 - s)).collect();
            let n = scale.len();
            let sds = DMatrix::from_fn(n, n, |i, j| scale[i] * d[(i, j)] * scale[j]);
            let sym = (&sds + sds.transpose()) * 0.5;
            if sym.iter().any(|x| !x.is_finite()) {
                return Some(Extremum {
                    value: f64::NAN,
                    witness: Witness {
                        points: vec![point(&ac)],
                        probe: None,
                        entry: None,
                        value: f64::NAN,
                    },
                });
            }
            let eig = sym.symmetric_eigen();
            let (idx, lo) = eig
                .eigenvalues
                .iter()
                .copied()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("nonempty spectrum");
            let y = eig.eigenvectors.column(idx);
            let z: Vec<f64> = (0..n).map(|i| scale[i] * y[i]).collect();
            // Negated so that the max-reduction finds the infimum.
            Some(Extremum {
                value: -lo,
                witness: Witness {
                    points: vec![point(&ac)],
                    probe: Some(z),
                    entry: None,
                    value: lo,
                },
            })
        })
        .collect();
    let (best, _) = reduce_max(items);
    let (statistic, witness) = match best {
        Some(e) => (-e.value, Some(e.witness)),
        None => (f64::NAN, None),
    };
    let verdict = if statistic.is_nan() {
        Verdict::Inconclusive
    } else if statistic > 0.0 {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(HypothesisReport {
        hypothesis: Hypothesis::H3,
        model: m.name().to_string(),
        verdict,
        statistic,
        witness,
        samples,
        margin: CHECK_MARGIN,
        seed,
        refinement: Vec::new(),
        details: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundednessVariant {
    /// `(h''A)_ij u_i^{1-s} u_j^{1-s}`.
    I,
    /// `Bbar_ij / (u_i^s u_j^s)`.
    Ii,
}

pub fn check_h4(
    m: &dyn CrossDiffusionModel,
    variant: BoundednessVariant,
    samples: usize,
    seed: u64,
) -> Result<HypothesisReport> {
    let s = m.entropy_exponent();
    let hypothesis = match variant {
        BoundednessVariant::I => Hypothesis::H4i,
        BoundednessVariant::Ii => Hypothesis::H4ii,
    };
    run_refinement(hypothesis, m, samples, seed, 0.0, |sampler, k| {
        let ac = sampler.sample(k);
        let c = ac.composition();
        let (mat, w): (DMatrix<f64>, Vec<f64>) = match variant {
            BoundednessVariant::I => (
                m.hessian_diffusion(&c).ok()?,
                c.fractions().iter().map(|u| u.powf(1.0 - s)).collect(),
            ),
            BoundednessVariant::Ii => (
                m.augmented_mobility(&c).entries,
                ac.values().iter().map(|u| u.powf(-s)).collect(),
            ),
        };
        let offset = usize::from(variant == BoundednessVariant::I);
        let mut best = (0.0_f64, (0, 0));
        for i in 0..mat.nrows() {
            for j in 0..mat.ncols() {
                let v = (mat[(i, j)] * w[i] * w[j]).abs();
                if v.is_nan() || v > best.0 {
                    best = (v, (i + offset, j + offset));
                }
            }
        }
        Some(Extremum {
            value: best.0,
            witness: Witness {
                points: vec![point(&ac)],
                probe: None,
                entry: Some(best.1),
                value: best.0,
            },
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LipschitzVariant {
    /// Denominator `sum_k |u_k - v_k|`.
    H5,
    /// Denominator `sum_k |u_k^gamma - v_k^gamma|`.
    H5Prime { gamma: f64 },
}

pub fn check_h5(
    m: &dyn CrossDiffusionModel,
    variant: LipschitzVariant,
    pairs: usize,
    seed: u64,
) -> Result<HypothesisReport> {
    let probe = SimplexSampler::new(m.species(), 0.0, seed)?.sample(0);
    if m.reduced_mobility(&probe).is_none() {
        return Err(Error::MissingReducedMobility(m.name().to_string()));
    }
    let (hypothesis, gamma) = match variant {
        LipschitzVariant::H5 => (Hypothesis::H5, 1.0),
        LipschitzVariant::H5Prime { gamma } => {
            if !(gamma > 0.0 && gamma <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "Hoelder exponent must lie in (0, 1], got {gamma}"
                )));
            }
            (Hypothesis::H5prime, gamma)
        }
    };
    let mut report = run_refinement(hypothesis, m, pairs, seed, 0.0, |sampler, k| {
        let (u, v) = sampler.pair(k);
        let denom: f64 = u
            .values()
            .iter()
            .zip(v.values())
            .map(|(a, b)| (a.powf(gamma) - b.powf(gamma)).abs())
            .sum();
        if denom < DENOMINATOR_GUARD {
            return None;
        }
        let ru = m.reduced_mobility(&u)?;
        let rv = m.reduced_mobility(&v)?;
        let diff = (ru - rv).abs();
        let (mut num, mut entry) = (0.0_f64, (0, 0));
        for i in 0..diff.nrows() {
            for j in 0..diff.ncols() {
                let x = diff[(i, j)];
                if x.is_nan() || x > num {
                    num = x;
                    entry = (i, j);
                }
            }
        }
        let value = num / denom;
        Some(Extremum {
            value,
            witness: Witness {
                points: vec![point(&u), point(&v)],
                probe: None,
                entry: Some(entry),
                value,
            },
        })
    })?;
    if let LipschitzVariant::H5Prime { gamma } = variant {
        report.details.insert("gamma".into(), gamma);
    }
    Ok(report)
}

/// Subspace inequality `z^T G z >= c_A sum_{i>=1} u_i^{2s-1} z_i^2` for
/// Gaussian `z` projected into `L(u)`.
///
/// Uses the same points as [`check_h3`] for the same seed. The statistic is
/// the smallest relative slack `lhs/rhs - 1`; `max_deviation` in the details
/// is the largest `|lhs/rhs - 1|`.
pub fn check_lemma_g(m: &dyn CrossDiffusionModel, c_a: f64, samples: usize, seed: u64) -> Result<HypothesisReport> {
    let s = m.entropy_exponent();
    subspace_check(Hypothesis::LemG, m, samples, seed, move |ac, z| {
        let u = ac.values();
        c_a * (1..u.len())
            .map(|i| u[i].powf(2.0 * s - 1.0) * z[i] * z[i])
            .sum::<f64>()
    })
}

/// Strengthened subspace inequality of the ion-channel model,
/// `z^T G z >= c_A (sum_{i>=1} z_i^2 + z_0^2/u_0)` with `c_A = min d_i`.
pub fn check_ion_lemma(m: &dyn CrossDiffusionModel, samples: usize, seed: u64) -> Result<HypothesisReport> {
    let c_a = m
        .improved_lemma_constant()
        .ok_or_else(|| Error::WrongModel(m.name().to_string()))?;
    check_ion_lemma_with_constant(m, c_a, samples, seed)
}

/// [`check_ion_lemma`] with an explicit constant.
pub fn check_ion_lemma_with_constant(
    m: &dyn CrossDiffusionModel,
    c_a: f64,
    samples: usize,
    seed: u64,
) -> Result<HypothesisReport> {
    if m.improved_lemma_constant().is_none() {
        return Err(Error::WrongModel(m.name().to_string()));
    }
    let mut report = subspace_check(Hypothesis::IonLemma, m, samples, seed, move |ac, z| {
        let u = ac.values();
        c_a * ((1..u.len()).map(|i| z[i] * z[i]).sum::<f64>() + z[0] * z[0] / u[0])
    })?;
    report.details.insert("c_A".into(), c_a);
    Ok(report)
}

fn subspace_check<F>(
    hypothesis: Hypothesis,
    m: &dyn CrossDiffusionModel,
    samples: usize,
    seed: u64,
    rhs: F,
) -> Result<HypothesisReport>
where
    F: Fn(&AugmentedComposition, &DVector<f64>) -> f64 + Sync,
{
    let sampler = SimplexSampler::for_checks(m.species(), CHECK_MARGIN, seed)?;
    let results: Vec<Option<(f64, f64, bool, Witness)>> = (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = sampler.rng(k);
            let ac = sampler.draw(&mut rng);
            let raw = gaussian(&mut rng, ac.values().len());
            // A second pass removes the sqrt(u) component left by
            // cancellation when `raw` is nearly parallel to sqrt(u).
            let z = project_l(&ac, &project_l(&ac, &raw));
            let bm = m.augmented_mobility(&ac.composition());
            let g = g_matrix(&bm, &ac).ok()?;
            let lhs = z.dot(&(&g.entries * &z));
            let r = rhs(&ac, &z);
            let g_norm = g.entries.row_iter().map(|row| row.abs().sum()).fold(0.0, f64::max);
            let roundoff = 64.0 * f64::EPSILON * g_norm * z.norm_squared();
            let ok = lhs >= r * (1.0 - INEQUALITY_SLACK) - roundoff;
            let rel = if r > DENOMINATOR_GUARD {
                lhs / r - 1.0
            } else {
                f64::INFINITY
            };
            let witness = Witness {
                points: vec![point(&ac)],
                probe: Some(z.iter().copied().collect()),
                entry: None,
                value: rel,
            };
            Some((rel, (lhs - r).abs() / r.max(DENOMINATOR_GUARD), ok, witness))
        })
        .collect();
    let mut min_rel = f64::INFINITY;
    let mut max_dev = 0.0_f64;
    let mut witness = None;
    let mut all_ok = true;
    let mut first_bad = None;
    let mut skipped = 0.0;
    for r in results {
        let Some((rel, dev, ok, w)) = r else {
            skipped += 1.0;
            continue;
        };
        if rel.is_finite() {
            max_dev = max_dev.max(dev);
        }
        if !ok && first_bad.is_none() {
            first_bad = Some(w.clone());
        }
        all_ok &= ok;
        if rel < min_rel || witness.is_none() {
            min_rel = rel;
            witness = Some(w);
        }
    }
    let mut details = BTreeMap::new();
    details.insert("max_deviation".into(), max_dev);
    details.insert("skipped".into(), skipped);
    Ok(HypothesisReport {
        hypothesis,
        model: m.name().to_string(),
        verdict: if all_ok { Verdict::Pass } else { Verdict::Fail },
        statistic: min_rel,
        witness: first_bad.or(witness),
        samples,
        margin: CHECK_MARGIN,
        seed,
        refinement: Vec::new(),
        details,
    })
}

/// Commutation `P_L G = G P_L = G` at sampled interior points.
pub fn check_gpl(m: &dyn CrossDiffusionModel, samples: usize, seed: u64) -> Result<HypothesisReport> {
    let sampler = SimplexSampler::for_checks(m.species(), CHECK_MARGIN, seed)?;
    let items: Vec<Option<Extremum>> = (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let ac = sampler.sample(k);
            let bm = m.augmented_mobility(&ac.composition());
            let g = g_matrix(&bm, &ac).ok()?;
            Some(gpl_deviation(&g.entries, &projector_l(&ac), &ac))
        })
        .collect();
    let (best, skipped) = reduce_max(items);
    let statistic = best.as_ref().map_or(0.0, |b| b.value);
    let mut details = BTreeMap::new();
    details.insert("skipped".into(), skipped as f64);
    Ok(HypothesisReport {
        hypothesis: Hypothesis::Gpl,
        model: m.name().to_string(),
        verdict: if statistic <= GPL_TOLERANCE {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        statistic,
        witness: best.map(|b| b.witness),
        samples,
        margin: CHECK_MARGIN,
        seed,
        refinement: Vec::new(),
        details,
    })
}

fn gpl_deviation(g: &DMatrix<f64>, p: &DMatrix<f64>, ac: &AugmentedComposition) -> Extremum {
    let left = (p * g - g).amax();
    let right = (g * p - g).amax();
    let g_norm = g.row_iter().map(|row| row.abs().sum()).fold(0.0, f64::max);
    let value = left.max(right) / (1.0 + g_norm);
    Extremum {
        value,
        witness: Witness {
            points: vec![point(ac)],
            probe: None,
            entry: None,
            value,
        },
    }
}

/// Relative commutation defect of an arbitrary `G` at `ac`.
pub fn gpl_defect(g: &DMatrix<f64>, ac: &AugmentedComposition) -> f64 {
    gpl_deviation(g, &projector_l(ac), ac).value
}

/// Empirical reaction constant: the largest sampled ratio of
/// `sum_i (r_i(u) - r_i(v)) (log u_i - log v_i)` to the relative entropy
/// density, both summed over `i = 0..n` with `r_0 = -sum r_i`.
pub fn estimate_cr(m: &dyn CrossDiffusionModel, pairs: usize, seed: u64) -> Result<HypothesisReport> {
    let probe = Composition::uniform(m.species());
    if m.reaction(&probe).is_none() {
        return Err(Error::MissingReaction(m.name().to_string()));
    }
    run_refinement(Hypothesis::Reaction, m, pairs, seed, 0.0, |sampler, k| {
        let (u, v) = sampler.pair(k);
        let rhs: f64 = u
            .values()
            .iter()
            .zip(v.values())
            .map(|(a, b)| a * (a / b).ln() - a + b)
            .sum();
        if rhs < DENOMINATOR_GUARD {
            return None;
        }
        let ru = augmented_reaction(m, &u)?;
        let rv = augmented_reaction(m, &v)?;
        let lhs: f64 = (0..ru.len())
            .map(|i| (ru[i] - rv[i]) * (u.values()[i].ln() - v.values()[i].ln()))
            .sum();
        let value = lhs / rhs;
        Some(Extremum {
            value,
            witness: Witness {
                points: vec![point(&u), point(&v)],
                probe: None,
                entry: None,
                value,
            },
        })
    })
}

fn augmented_reaction(m: &dyn CrossDiffusionModel, ac: &AugmentedComposition) -> Option<Vec<f64>> {
    let r = m.reaction(&ac.composition())?;
    let mut out = Vec::with_capacity(r.len() + 1);
    out.push(-r.sum());
    out.extend(r.iter());
    Some(out)
}

/// A check named in a configuration or a regression table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CheckRequest {
    H3,
    H4(BoundednessVariant),
    H5(LipschitzVariant),
    /// Subspace inequality with the given constant, or with the empirical
    /// constant from an `H3` run on the same seed when `None`.
    LemG(Option<f64>),
    Gpl,
    Reaction,
    IonLemma,
}

impl CheckRequest {
    pub fn hypothesis(&self) -> Hypothesis {
        match self {
            Self::H3 => Hypothesis::H3,
            Self::H4(BoundednessVariant::I) => Hypothesis::H4i,
            Self::H4(BoundednessVariant::Ii) => Hypothesis::H4ii,
            Self::H5(LipschitzVariant::H5) => Hypothesis::H5,
            Self::H5(LipschitzVariant::H5Prime { .. }) => Hypothesis::H5prime,
            Self::LemG(_) => Hypothesis::LemG,
            Self::Gpl => Hypothesis::Gpl,
            Self::Reaction => Hypothesis::Reaction,
            Self::IonLemma => Hypothesis::IonLemma,
        }
    }
}

pub fn run_check(
    m: &dyn CrossDiffusionModel,
    request: CheckRequest,
    samples: usize,
    seed: u64,
) -> Result<HypothesisReport> {
    match request {
        CheckRequest::H3 => check_h3(m, samples, seed),
        CheckRequest::H4(v) => check_h4(m, v, samples, seed),
        CheckRequest::H5(v) => check_h5(m, v, samples, seed),
        CheckRequest::LemG(c) => {
            let c_a = match c {
                Some(c) => c,
                None => check_h3(m, samples, seed)?.empirical_constant(),
            };
            let mut r = check_lemma_g(m, c_a, samples, seed)?;
            r.details.insert("c_A".into(), c_a);
            Ok(r)
        }
        CheckRequest::Gpl => check_gpl(m, samples, seed),
        CheckRequest::Reaction => estimate_cr(m, samples, seed),
        CheckRequest::IonLemma => check_ion_lemma(m, samples, seed),
    }
}

/// Hypotheses each catalog model is known to satisfy, and the ones the
/// ion-channel model is known to violate, with the expected verdicts.
pub fn expected_verdicts(m: &crate::models::ModelSpec) -> Vec<(CheckRequest, Verdict)> {
    use crate::models::ModelParams as P;
    use BoundednessVariant::{Ii, I};
    use Verdict::{Fail, Pass};
    match &m.params {
        P::Scalar { alpha } => {
            let gamma = if *alpha > 0.0 { *alpha } else { 1.0 };
            vec![
                (CheckRequest::H3, Pass),
                (CheckRequest::H4(I), Pass),
                (CheckRequest::H5(LipschitzVariant::H5Prime { gamma }), Pass),
            ]
        }
        P::Multiphase { .. } | P::Tumor { .. } | P::BusenbergTravis { .. } => vec![
            (CheckRequest::H3, Pass),
            (CheckRequest::H4(I), Pass),
            (CheckRequest::H5(LipschitzVariant::H5), Pass),
        ],
        P::MaxwellStefan { .. } | P::ThinFilm { .. } => vec![
            (CheckRequest::H3, Pass),
            (CheckRequest::H4(Ii), Pass),
            (CheckRequest::H5(LipschitzVariant::H5), Pass),
        ],
        P::IonChannel { .. } => vec![
            (CheckRequest::H3, Pass),
            (CheckRequest::H4(Ii), Fail),
            (CheckRequest::H5(LipschitzVariant::H5), Fail),
            (CheckRequest::IonLemma, Pass),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;

    #[test]
    fn sampler_respects_margin_and_is_deterministic() {
        let s = SimplexSampler::new(2, 1e-3, 9).unwrap().with_boundary_fraction(0.5);
        let a = s.sample_simplex(200).unwrap();
        let b = s.sample_simplex(200).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(p.values().iter().all(|&x| x >= 1e-3 * (1.0 - 1e-12)));
            assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        let t = SimplexSampler::new(1, 0.0, 3).unwrap();
        assert_eq!(t.sample_simplex(3).unwrap(), t.sample_simplex(3).unwrap());
        assert!(t.sample_simplex(0).is_err());
    }

    #[test]
    fn infeasible_margin_is_rejected() {
        assert!(matches!(
            SimplexSampler::new(2, 0.6, 0),
            Err(Error::SamplerExhausted { .. })
        ));
        assert!(SimplexSampler::new(2, 1.0 / 3.0, 0).is_err());
        assert!(SimplexSampler::new(2, 0.3, 0).is_ok());
    }

    #[test]
    fn pairs_stay_above_margin() {
        let s = SimplexSampler::for_checks(3, 1e-4, 5).unwrap();
        for k in 0..300 {
            let (u, v) = s.pair(k);
            for x in u.values().iter().chain(v.values()) {
                assert!(*x >= 1e-4 * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn refinement_rules() {
        assert_eq!(refinement_verdict(&[1.0, 1.05, 1.09]), Verdict::Pass);
        assert_eq!(refinement_verdict(&[0.9, 1.0, 1.0]), Verdict::Pass);
        assert_eq!(refinement_verdict(&[0.89, 1.0, 1.0]), Verdict::Inconclusive);
        assert_eq!(refinement_verdict(&[1.0, 11.0, 121.0]), Verdict::Fail);
        assert_eq!(refinement_verdict(&[1.0, 3.0, 9.0]), Verdict::Inconclusive);
        assert_eq!(refinement_verdict(&[0.0, 0.0, 0.0]), Verdict::Pass);
    }

    #[test]
    fn h3_closed_form_cases() {
        let r = check_h3(&ModelSpec::scalar(1.0).unwrap(), 500, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!((r.statistic - 1.0).abs() < 1e-12);
        let bt = ModelSpec::busenberg_travis(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = check_h3(&bt, 500, 1).unwrap();
        assert!((r.statistic - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gpl_passes_on_catalog() {
        for m in ModelSpec::catalog() {
            let r = check_gpl(&m, 300, 2).unwrap();
            assert_eq!(r.verdict, Verdict::Pass, "{}: {}", m.name, r.statistic);
        }
    }

    #[test]
    fn gpl_defect_of_zero_matrix() {
        let ac = AugmentedComposition::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(gpl_defect(&DMatrix::zeros(3, 3), &ac), 0.0);
    }

    #[test]
    fn missing_capabilities() {
        let m = ModelSpec::preset("tumor").unwrap();
        assert!(matches!(estimate_cr(&m, 10, 0), Err(Error::MissingReaction(_))));
        assert!(matches!(check_ion_lemma(&m, 10, 0), Err(Error::WrongModel(_))));
    }

    #[test]
    fn report_serializes() {
        let r = check_h3(&ModelSpec::preset("tumor").unwrap(), 50, 4).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"hypothesis\":\"H3\""));
        assert!(json.contains("\"verdict\":\"PASS\""));
        let back: HypothesisReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
