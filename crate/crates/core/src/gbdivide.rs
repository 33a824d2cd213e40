//! Coarse-to-fine hierarchical division of a reduced descriptor matrix into
//! granular balls, gated by a compactness-improvement margin.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GbError, Result};
use crate::gbsplit::{self, WeightVector};

const SPLIT_MAX_ITER: usize = 100;
const SPLIT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivisionParams {
    /// Split margin: a split is kept only if child compactness is below
    /// tau times the parent's.
    #[serde(with = "tau_serde")]
    pub tau: f64,
    pub beta: f64,
    pub eps: f64,
    pub d_max: usize,
    pub min_ball: usize,
    pub rng_seed: u64,
}

impl Default for DivisionParams {
    fn default() -> Self {
        DivisionParams {
            tau: 1.05,
            beta: 2.0,
            eps: 1e-12,
            d_max: 12,
            min_ball: 4,
            rng_seed: 0,
        }
    }
}

impl DivisionParams {
    fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(GbError::invalid("tau must be >= 0"));
        }
        if !(self.beta > 1.0) || !self.beta.is_finite() {
            return Err(GbError::invalid("beta must be > 1"));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(GbError::invalid("eps must be > 0"));
        }
        if self.min_ball < 2 {
            return Err(GbError::invalid("min_ball must be >= 2"));
        }
        Ok(())
    }
}

/// Serializes an infinite split margin as the string "inf" so the JSON echo
/// stays valid; finite values stay plain numbers.
mod tau_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    struct TauVisitor;

    impl Visitor<'_> for TauVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a number or the string \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
            Ok(v)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
            match v.trim().to_ascii_lowercase().as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                other => other
                    .parse::<f64>()
                    .map_err(|_| de::Error::custom(format!("bad tau value {other:?}"))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        d.deserialize_any(TauVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularBall {
    pub ball_id: usize,
    pub depth: usize,
    pub center: Vec<f64>,
    pub weight: WeightVector,
    pub compactness: f64,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallSet {
    pub balls: Vec<GranularBall>,
    pub n: usize,
    pub params_echo: DivisionParams,
}

/// One accepted split, kept so the margin test can be re-verified from the
/// stored members and weights alone.
#[derive(Debug, Clone)]
pub struct SplitRecord {
    pub parent_indices: Vec<usize>,
    pub parent_weight: WeightVector,
    pub parent_dm: f64,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub learned_weight: WeightVector,
    pub child_dm: f64,
}

/// Mean weighted distance of the members to their own mean.
pub fn dm(members: ArrayView2<'_, f64>, w: &WeightVector) -> Result<f64> {
    let (n, d) = members.dim();
    if n == 0 {
        return Err(GbError::invalid("empty ball"));
    }
    if d != w.len() {
        return Err(GbError::invalid("dimension mismatch"));
    }
    let mut center = vec![0.0; d];
    for row in members.rows() {
        for j in 0..d {
            center[j] += row[j];
        }
    }
    for c in &mut center {
        *c /= n as f64;
    }
    let wv = w.as_slice();
    let mut total = 0.0;
    for row in members.rows() {
        let mut s = 0.0;
        for j in 0..d {
            let diff = row[j] - center[j];
            s += wv[j] * diff * diff;
        }
        total += s.sqrt();
    }
    Ok(total / n as f64)
}

/// Size-weighted mean of the two children's compactness under a shared weight.
pub fn child_dm(b1: ArrayView2<'_, f64>, b2: ArrayView2<'_, f64>, w: &WeightVector) -> Result<f64> {
    if b1.nrows() == 0 || b2.nrows() == 0 {
        return Err(GbError::invalid("empty child"));
    }
    let n1 = b1.nrows() as f64;
    let n2 = b2.nrows() as f64;
    Ok((n1 * dm(b1, w)? + n2 * dm(b2, w)?) / (n1 + n2))
}

fn gather(z: ArrayView2<'_, f64>, indices: &[usize]) -> Array2<f64> {
    let d = z.ncols();
    let mut out = Array2::zeros((indices.len(), d));
    for (k, &i) in indices.iter().enumerate() {
        out.row_mut(k).assign(&z.row(i));
    }
    out
}

struct Pending {
    id: usize,
    indices: Vec<usize>,
    weight: WeightVector,
    depth: usize,
}

enum Outcome {
    Leaf {
        center: Vec<f64>,
        compactness: f64,
    },
    Split {
        left: Vec<usize>,
        right: Vec<usize>,
        learned_weight: WeightVector,
        record: SplitRecord,
    },
}

fn process(z: ArrayView2<'_, f64>, p: &Pending, params: &DivisionParams) -> Result<Outcome> {
    let block = gather(z, &p.indices);
    let compactness = dm(block.view(), &p.weight)?;
    let d = z.ncols();
    let mut center = vec![0.0; d];
    for row in block.rows() {
        for j in 0..d {
            center[j] += row[j];
        }
    }
    for c in &mut center {
        *c /= p.indices.len() as f64;
    }
    let leaf = Ok(Outcome::Leaf {
        center,
        compactness,
    });
    if p.indices.len() < params.min_ball || p.depth >= params.d_max {
        return leaf;
    }
    let split = match gbsplit::weighted_2means(
        block.view(),
        params.beta,
        params.eps,
        SPLIT_MAX_ITER,
        SPLIT_TOL,
        params.rng_seed,
    ) {
        Ok(s) => s,
        Err(GbError::InvalidInput(msg)) if msg.contains("unsplittable") => return leaf,
        Err(e) => return Err(e),
    };
    let left_block = gather(block.view(), &split.left_indices);
    let right_block = gather(block.view(), &split.right_indices);
    let cdm = child_dm(left_block.view(), right_block.view(), &split.weight)?;
    if !(cdm < params.tau * compactness) {
        return leaf;
    }
    let to_global = |local: &[usize]| local.iter().map(|&i| p.indices[i]).collect::<Vec<_>>();
    let left = to_global(&split.left_indices);
    let right = to_global(&split.right_indices);
    let record = SplitRecord {
        parent_indices: p.indices.clone(),
        parent_weight: p.weight.clone(),
        parent_dm: compactness,
        left: left.clone(),
        right: right.clone(),
        learned_weight: split.weight.clone(),
        child_dm: cdm,
    };
    Ok(Outcome::Split {
        left,
        right,
        learned_weight: split.weight,
        record,
    })
}

/// Division plus the accepted-split audit trail.
///
/// Balls are processed breadth-first; each wave is split in parallel and the
/// results are folded back in queue order, so ids and output are identical
/// to a sequential run regardless of worker count.
pub fn divide_traced(
    z: ArrayView2<'_, f64>,
    params: &DivisionParams,
) -> Result<(BallSet, Vec<SplitRecord>)> {
    params.validate()?;
    let (n, d) = z.dim();
    if n == 0 {
        return Err(GbError::invalid("empty dataset"));
    }
    if d == 0 {
        return Err(GbError::invalid("points must have at least one dimension"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in descriptor matrix".into()));
    }
    let mut leaves = Vec::new();
    let mut records = Vec::new();
    let mut wave = vec![Pending {
        id: 0,
        indices: (0..n).collect(),
        weight: WeightVector::uniform(d),
        depth: 0,
    }];
    let mut next_id = 1usize;
    while !wave.is_empty() {
        let outcomes: Vec<Result<Outcome>> = wave
            .par_iter()
            .map(|p| process(z, p, params))
            .collect();
        let mut next_wave = Vec::new();
        for (p, outcome) in wave.into_iter().zip(outcomes) {
            match outcome? {
                Outcome::Leaf {
                    center,
                    compactness,
                } => leaves.push(GranularBall {
                    ball_id: p.id,
                    depth: p.depth,
                    center,
                    weight: p.weight,
                    compactness,
                    indices: p.indices,
                }),
                Outcome::Split {
                    left,
                    right,
                    learned_weight,
                    record,
                } => {
                    records.push(record);
                    for child in [left, right] {
                        next_wave.push(Pending {
                            id: next_id,
                            indices: child,
                            weight: learned_weight.clone(),
                            depth: p.depth + 1,
                        });
                        next_id += 1;
                    }
                }
            }
        }
        wave = next_wave;
    }
    Ok((
        BallSet {
            balls: leaves,
            n,
            params_echo: params.clone(),
        },
        records,
    ))
}

/// Divides the reduced matrix into leaf balls. The root starts with uniform
/// weights; accepted children inherit the weight learned by their split.
pub fn divide(z: ArrayView2<'_, f64>, params: &DivisionParams) -> Result<BallSet> {
    Ok(divide_traced(z, params)?.0)
}
