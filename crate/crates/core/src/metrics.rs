//! Disentanglement metrics (MIG, SAP, DCI disentanglement, FactorVAE score),
//! linear CKA representation similarity, and the quantile discretization they
//! share. Every score lies in [0, 1].

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KfError, Result};
use crate::exec;
use crate::mi::{exact_mi_discrete, JointTable};

/// Default bin count for code discretization.
pub const DEFAULT_BINS: usize = 20;

/// Fixed-factor batch size of the FactorVAE protocol.
pub const FACTOR_VAE_BATCH: usize = 64;

/// Default vote count of the FactorVAE protocol.
pub const FACTOR_VAE_VOTES: usize = 800;

/// Representations paired with their ground-truth factor indices.
#[derive(Debug, Clone)]
pub struct CodeMatrix {
    /// (n, D) real codes.
    pub codes: Array2<f64>,
    /// (n, F) factor indices.
    pub factors: Array2<usize>,
}

impl CodeMatrix {
    pub fn new(codes: Array2<f64>, factors: Array2<usize>) -> Result<Self> {
        if codes.nrows() < 2 {
            return Err(KfError::invalid("CodeMatrix needs at least 2 samples"));
        }
        if codes.nrows() != factors.nrows() {
            return Err(KfError::shape(format!(
                "{} code rows vs {} factor rows",
                codes.nrows(),
                factors.nrows()
            )));
        }
        if factors.ncols() == 0 {
            return Err(KfError::invalid("CodeMatrix needs at least one factor"));
        }
        for f in 0..factors.ncols() {
            let col = factors.column(f);
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(KfError::invalid(format!("factor column {f} is constant")));
            }
        }
        Ok(Self { codes, factors })
    }

    pub fn num_dims(&self) -> usize {
        self.codes.ncols()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.ncols()
    }
}

/// Result of per-dimension quantile binning.
#[derive(Debug, Clone)]
pub struct DiscretizedCodes {
    /// (n, D) bin indices in [0, bins).
    pub bins: Array2<usize>,
    /// Dimensions that were constant (mapped to a single bin).
    pub constant_dims: Vec<bool>,
}

/// Equal-count (quantile) binning per dimension. Ties share a bin, so any
/// monotone transform of a dimension yields identical assignments.
pub fn discretize(codes: &Array2<f64>, bins: usize) -> Result<DiscretizedCodes> {
    if bins < 2 {
        return Err(KfError::invalid("bins must be >= 2"));
    }
    let (n, d) = codes.dim();
    if n == 0 {
        return Err(KfError::invalid("empty code matrix"));
    }
    let columns: Vec<(Vec<usize>, bool)> = exec::map_indexed(d, |j| {
        let col = codes.column(j);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| col[a].partial_cmp(&col[b]).expect("finite codes"));
        let mut assignment = vec![0usize; n];
        let mut i = 0;
        while i < n {
            let mut k = i;
            while k + 1 < n && col[order[k + 1]] == col[order[i]] {
                k += 1;
            }
            let bin = (i * bins) / n;
            for &idx in &order[i..=k] {
                assignment[idx] = bin;
            }
            i = k + 1;
        }
        let constant = col.iter().all(|&v| v == col[0]);
        (assignment, constant)
    });
    let mut out = Array2::zeros((n, d));
    let mut constant_dims = Vec::with_capacity(d);
    for (j, (assignment, constant)) in columns.into_iter().enumerate() {
        for (i, &b) in assignment.iter().enumerate() {
            out[[i, j]] = b;
        }
        constant_dims.push(constant);
    }
    Ok(DiscretizedCodes { bins: out, constant_dims })
}

/// Empirical entropy (nats) of an integer column.
fn entropy_of(values: impl Iterator<Item = usize>, support: usize) -> f64 {
    let mut counts = vec![0usize; support];
    let mut n = 0usize;
    for v in values {
        counts[v] += 1;
        n += 1;
    }
    let nf = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / nf;
            -p * p.ln()
        })
        .sum()
}

/// Contingency-table MI between one binned code dimension and one factor.
fn dim_factor_mi(bins_col: &[usize], num_bins: usize, factor_col: &[usize], card: usize) -> f64 {
    let mut counts = Array2::zeros((num_bins, card));
    for (&b, &f) in bins_col.iter().zip(factor_col) {
        counts[[b, f]] += 1.0;
    }
    let table = JointTable::from_weights(counts).expect("non-empty contingency table");
    exact_mi_discrete(&table)
}

/// Mutual Information Gap: mean over factors of the normalized gap between
/// the two code dimensions with highest MI against that factor.
pub fn mig(cm: &CodeMatrix, bins: usize) -> Result<f64> {
    let disc = discretize(&cm.codes, bins)?;
    let (n, d) = cm.codes.dim();
    let f_count = cm.num_factors();
    let bin_cols: Vec<Vec<usize>> =
        (0..d).map(|j| disc.bins.column(j).to_vec()).collect();
    let per_factor: Vec<f64> = exec::map_indexed(f_count, |f| {
        let factor_col: Vec<usize> = cm.factors.column(f).to_vec();
        let card = factor_col.iter().max().copied().unwrap_or(0) + 1;
        let h = entropy_of(factor_col.iter().copied(), card);
        if h <= 0.0 {
            return 0.0;
        }
        let mut mis: Vec<f64> = bin_cols
            .iter()
            .map(|col| dim_factor_mi(col, bins, &factor_col, card))
            .collect();
        mis.sort_by(|a, b| b.partial_cmp(a).expect("finite MI"));
        let top1 = mis.first().copied().unwrap_or(0.0);
        let top2 = if mis.len() > 1 { mis[1] } else { 0.0 };
        (((top1 - top2) / h).max(0.0)).min(1.0)
    });
    let _ = n;
    Ok(per_factor.iter().sum::<f64>() / f_count as f64)
}

/// Balanced accuracy of the best interval classifier on one real-valued
/// dimension: quantile-bin the dimension, let each bin predict the class
/// with the highest prior-normalized count (the balanced-Bayes rule).
fn single_dim_balanced_accuracy(values: &[f64], labels: &[usize]) -> f64 {
    let n = values.len();
    let card = labels.iter().max().copied().unwrap_or(0) + 1;
    let mut class_totals = vec![0usize; card];
    for &y in labels {
        class_totals[y] += 1;
    }
    let present: Vec<usize> = (0..card).filter(|&c| class_totals[c] > 0).collect();
    let k = present.len();
    // At least one bin per class, so high-cardinality factors stay
    // predictable from a perfectly aligned dimension.
    let bins = DEFAULT_BINS.max(k).min(n);
    let col = Array2::from_shape_vec((n, 1), values.to_vec()).expect("column");
    let disc = discretize(&col, bins.max(2)).expect("bins >= 2");
    let mut counts = vec![vec![0usize; card]; bins];
    for (i, &y) in labels.iter().enumerate() {
        counts[disc.bins[[i, 0]]][y] += 1;
    }
    let mut recall_hits = vec![0usize; card];
    for bin_counts in &counts {
        let mut best: Option<usize> = None;
        let mut best_rate = -1.0;
        for &c in &present {
            let rate = bin_counts[c] as f64 / class_totals[c] as f64;
            if rate > best_rate {
                best_rate = rate;
                best = Some(c);
            }
        }
        if let Some(c) = best {
            recall_hits[c] += bin_counts[c];
        }
    }
    let balanced: f64 = present
        .iter()
        .map(|&c| recall_hits[c] as f64 / class_totals[c] as f64)
        .sum::<f64>()
        / k as f64;
    balanced
}

/// Separated Attribute Predictability: mean over factors of the gap between
/// the two most predictive single dimensions.
pub fn sap(cm: &CodeMatrix) -> Result<f64> {
    let d = cm.num_dims();
    let f_count = cm.num_factors();
    let per_factor: Vec<f64> = exec::map_indexed(f_count, |f| {
        let labels: Vec<usize> = cm.factors.column(f).to_vec();
        let mut scores: Vec<f64> = (0..d)
            .map(|j| {
                let values: Vec<f64> = cm.codes.column(j).to_vec();
                single_dim_balanced_accuracy(&values, &labels)
            })
            .collect();
        scores.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
        let top1 = scores.first().copied().unwrap_or(0.0);
        let top2 = if scores.len() > 1 { scores[1] } else { 0.0 };
        (top1 - top2).clamp(0.0, 1.0)
    });
    Ok(per_factor.iter().sum::<f64>() / f_count as f64)
}

/// L1 strength for the importance regressions.
const DCI_L1: f64 = 0.02;
const DCI_ITERS: usize = 600;
const DCI_LR: f64 = 0.5;
/// Coefficients below this magnitude (on standardized inputs) carry no real
/// predictive power and are treated as zero importance.
const DCI_MIN_IMPORTANCE: f64 = 0.1;

/// Multinomial logistic regression trained with proximal (ISTA) steps; the
/// L1 penalty drives uninformative coefficients to exactly zero.
fn sparse_multinomial_coefs(x: &Array2<f64>, labels: &[usize], card: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let nf = n as f64;
    let mut w = Array2::zeros((card, d));
    let mut b: Array1<f64> = Array1::zeros(card);
    let mut onehot = Array2::zeros((n, card));
    for (i, &y) in labels.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    for _ in 0..DCI_ITERS {
        // softmax probabilities
        let logits = x.dot(&w.t()) + &b;
        let mut p = logits;
        for mut row in p.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let resid = &p - &onehot;
        let grad_w = resid.t().dot(x) / nf;
        let grad_b = resid.sum_axis(ndarray::Axis(0)) / nf;
        ndarray::Zip::from(&mut w).and(&grad_w).for_each(|wi, &g| {
            let stepped = *wi - DCI_LR * g;
            let thresh = DCI_LR * DCI_L1;
            *wi = if stepped > thresh {
                stepped - thresh
            } else if stepped < -thresh {
                stepped + thresh
            } else {
                0.0
            };
        });
        ndarray::Zip::from(&mut b).and(&grad_b).for_each(|bi, &g| *bi -= DCI_LR * g);
    }
    w
}

fn standardize_columns(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let nf = n as f64;
    let mut out = x.clone();
    for j in 0..d {
        let mean = out.column(j).sum() / nf;
        let var = out.column(j).iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let std = var.sqrt();
        if std > 1e-12 {
            out.column_mut(j).mapv_inplace(|v| (v - mean) / std);
        } else {
            out.column_mut(j).fill(0.0);
        }
    }
    out
}

/// Importance matrix (D, F) for DCI: mean absolute multinomial-LR
/// coefficient of each dimension for each factor.
pub fn dci_importance(cm: &CodeMatrix) -> Array2<f64> {
    let x = standardize_columns(&cm.codes);
    let d = cm.num_dims();
    let f_count = cm.num_factors();
    let per_factor: Vec<Vec<f64>> = exec::map_indexed(f_count, |f| {
        let labels: Vec<usize> = cm.factors.column(f).to_vec();
        let card = labels.iter().max().copied().unwrap_or(0) + 1;
        let w = sparse_multinomial_coefs(&x, &labels, card);
        (0..d)
            .map(|j| {
                let imp = w.column(j).iter().map(|v| v.abs()).sum::<f64>() / card as f64;
                if imp >= DCI_MIN_IMPORTANCE {
                    imp
                } else {
                    0.0
                }
            })
            .collect()
    });
    let mut r = Array2::zeros((d, f_count));
    for (f, col) in per_factor.iter().enumerate() {
        for (j, &v) in col.iter().enumerate() {
            r[[j, f]] = v;
        }
    }
    r
}

/// DCI disentanglement of an importance matrix: per-dimension
/// 1 - H(normalized row)/ln F, aggregated with relative-importance weights.
/// Dimensions with all-zero importance get zero weight; an all-zero matrix
/// scores 0.
pub fn disentanglement_from_importance(r: &Array2<f64>) -> f64 {
    let (d, f) = r.dim();
    if f < 2 {
        return 1.0;
    }
    let total: f64 = r.sum();
    if total <= 0.0 {
        return 0.0;
    }
    let log_f = (f as f64).ln();
    let mut score = 0.0;
    for j in 0..d {
        let row_sum: f64 = r.row(j).sum();
        if row_sum <= 0.0 {
            continue;
        }
        let h: f64 = r
            .row(j)
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v / row_sum;
                -p * p.ln()
            })
            .sum();
        let per_dim = 1.0 - h / log_f;
        score += (row_sum / total) * per_dim;
    }
    score.clamp(0.0, 1.0)
}

/// DCI disentanglement score from codes and factors.
pub fn dci_disentanglement(cm: &CodeMatrix) -> Result<f64> {
    Ok(disentanglement_from_importance(&dci_importance(cm)))
}

/// FactorVAE score: accuracy of the majority-vote classifier that maps the
/// lowest-variance (normalized) code dimension of a fixed-factor batch to
/// the fixed factor's index.
pub fn factor_vae_score(cm: &CodeMatrix, votes: usize, seed: u64) -> Result<f64> {
    if votes == 0 {
        return Err(KfError::invalid("votes must be > 0"));
    }
    let (n, d) = cm.codes.dim();
    let nf = n as f64;
    // Global per-dimension std; collapsed dimensions are excluded.
    let mut stds = Vec::with_capacity(d);
    for j in 0..d {
        let mean = cm.codes.column(j).sum() / nf;
        let var = cm.codes.column(j).iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        stds.push(var.sqrt());
    }
    let active_dims: Vec<usize> = (0..d).filter(|&j| stds[j] > 1e-12).collect();
    if active_dims.is_empty() {
        return Err(KfError::invalid("all code dimensions are collapsed"));
    }
    // Factors with a single observed value are excluded from the protocol.
    let f_count = cm.num_factors();
    let mut groups: Vec<Vec<(usize, Vec<usize>)>> = Vec::with_capacity(f_count);
    for f in 0..f_count {
        let mut by_value: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &v) in cm.factors.column(f).iter().enumerate() {
            by_value.entry(v).or_default().push(i);
        }
        groups.push(by_value.into_iter().collect());
    }
    let active_factors: Vec<usize> = (0..f_count).filter(|&f| groups[f].len() > 1).collect();
    if active_factors.is_empty() {
        return Err(KfError::invalid("no factor varies in the sample"));
    }
    // One seeded RNG per vote keeps the parallel path deterministic.
    let tallies: Vec<(usize, usize)> = exec::map_indexed(votes, |v| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(v as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let f = active_factors[rng.gen_range(0..active_factors.len())];
        let (_, members) = &groups[f][rng.gen_range(0..groups[f].len())];
        let mut variances = vec![0.0; active_dims.len()];
        for (slot, &j) in active_dims.iter().enumerate() {
            let mut mean = 0.0;
            let mut picks = Vec::with_capacity(FACTOR_VAE_BATCH);
            for _ in 0..FACTOR_VAE_BATCH {
                let i = members[rng.gen_range(0..members.len())];
                let val = cm.codes[[i, j]] / stds[j];
                picks.push(val);
                mean += val;
            }
            mean /= FACTOR_VAE_BATCH as f64;
            variances[slot] =
                picks.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / FACTOR_VAE_BATCH as f64;
        }
        let argmin = variances
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite variance"))
            .map(|(slot, _)| active_dims[slot])
            .expect("non-empty dims");
        (argmin, f)
    });
    // Majority-vote classifier accuracy.
    let mut counts = Array2::<f64>::zeros((d, f_count));
    for (dim, f) in tallies {
        counts[[dim, f]] += 1.0;
    }
    let correct: f64 = (0..d)
        .map(|j| counts.row(j).iter().cloned().fold(0.0, f64::max))
        .sum();
    Ok(correct / votes as f64)
}

/// Linear centered kernel alignment between two representation matrices:
/// ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered inputs.
pub fn linear_cka(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(KfError::shape(format!(
            "CKA needs matching sample counts, got {} vs {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(KfError::invalid("CKA needs at least 2 samples"));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let cross = yc.t().dot(&xc);
    let xx = xc.t().dot(&xc);
    let yy = yc.t().dot(&yc);
    let hsic = cross.iter().map(|v| v * v).sum::<f64>();
    let nx = xx.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = yy.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx <= 0.0 || ny <= 0.0 {
        return Err(KfError::invalid("CKA undefined for zero-variance input"));
    }
    Ok((hsic / (nx * ny)).clamp(0.0, 1.0))
}

fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    let nf = x.nrows() as f64;
    for mut col in out.columns_mut() {
        let mean = col.sum() / nf;
        col.mapv_inplace(|v| v - mean);
    }
    out
}

/// Mean pairwise CKA over a set of representations.
pub fn mean_pairwise_cka(features: &[Array2<f64>]) -> Result<f64> {
    if features.len() < 2 {
        return Err(KfError::invalid("need at least two representations"));
    }
    let mut values = Vec::new();
    for i in 0..features.len() {
        for j in (i + 1)..features.len() {
            values.push(linear_cka(&features[i], &features[j])?);
        }
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
