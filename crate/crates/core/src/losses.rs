//! Loss functions over continuous codes and their exact gradients.
//!
//! Everything here is a pure function of the batch codes `h` (B x K, entries
//! in `[-1, 1]`) and the pairwise similarity block. Gradients returned are
//! true derivatives of the returned values, so they can be checked against
//! finite differences.

use crate::error::{Error, Result};
use crate::matrix::{dot, sign_pm, Matrix};

/// Pairwise similarity labels for one batch: entries in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityBlock {
    size: usize,
    values: Vec<u8>,
    symmetric: bool,
}

impl SimilarityBlock {
    /// Builds a block from a row-major `{0,1}` buffer of length `size^2`.
    pub fn new(size: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::config(format!(
                "similarity buffer length {} does not match {size}x{size}",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::data("similarity entries must be 0 or 1"));
        }
        let symmetric = (0..size)
            .all(|i| (0..size).all(|j| values[i * size + j] == values[j * size + i]));
        Ok(SimilarityBlock {
            size,
            values,
            symmetric,
        })
    }

    /// Pairwise similarity of label sets: 1 iff the sets intersect.
    /// Always symmetric with an all-ones diagonal.
    pub fn from_labels(labels: &[Vec<u32>]) -> Self {
        let size = labels.len();
        let mut values = vec![0u8; size * size];
        for i in 0..size {
            values[i * size + i] = 1;
            for j in i + 1..size {
                let s = if label_sets_intersect(&labels[i], &labels[j]) {
                    1
                } else {
                    0
                };
                values[i * size + j] = s;
                values[j * size + i] = s;
            }
        }
        SimilarityBlock {
            size,
            values,
            symmetric: true,
        }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.values[i * self.size + j]
    }

    #[inline]
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }
}

/// Intersection test on sorted label slices.
pub(crate) fn label_sets_intersect(a: &[u32], b: &[u32]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Equal => return true,
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    false
}

/// Which quantization penalty a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    L2,
    LogCosh,
    Eaq,
    None,
}

impl std::str::FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(QuantizerKind::L2),
            "logcosh" => Ok(QuantizerKind::LogCosh),
            "eaq" => Ok(QuantizerKind::Eaq),
            "none" => Ok(QuantizerKind::None),
            other => Err(Error::config(format!(
                "unknown quantizer '{other}' (expected l2, logcosh, eaq, or none)"
            ))),
        }
    }
}

impl std::fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            QuantizerKind::L2 => "l2",
            QuantizerKind::LogCosh => "logcosh",
            QuantizerKind::Eaq => "eaq",
            QuantizerKind::None => "none",
        };
        write!(f, "{s}")
    }
}

/// Decomposed loss: `total = similarity_term + eta * quantization_term`,
/// computed exactly in that form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub similarity_term: f64,
    pub quantization_term: f64,
    pub total: f64,
    pub eta: f64,
}

impl LossValue {
    fn compose(similarity_term: f64, quantization_term: f64, eta: f64) -> Self {
        LossValue {
            similarity_term,
            quantization_term,
            total: similarity_term + eta * quantization_term,
            eta,
        }
    }
}

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_codes(codes: &Matrix) -> Result<()> {
    if !codes.is_finite() {
        return Err(Error::data("non-finite code value"));
    }
    Ok(())
}

fn check_pair_shapes(codes: &Matrix, sim: &SimilarityBlock) -> Result<()> {
    if sim.size() != codes.rows() {
        return Err(Error::config(format!(
            "similarity block is {}x{} but batch has {} rows",
            sim.size(),
            sim.size(),
            codes.rows()
        )));
    }
    check_codes(codes)
}

/// Pairwise similarity-preserving loss over all ordered pairs of the batch.
///
/// With `Theta_ij = <h_i, h_j> / 2`:
/// value  = sum_ij ( log(1 + e^Theta_ij) - S_ij * Theta_ij )
/// grad   = exact derivative w.r.t. the codes; `h_i` contributes through both
/// `Theta_ij` and `Theta_ji`, which for a symmetric block collapses to
/// `grad[i][k] = sum_j (sigmoid(Theta_ij) - S_ij) * h_j[k]`.
pub fn similarity_loss(codes: &Matrix, sim: &SimilarityBlock) -> Result<(f64, Matrix)> {
    check_pair_shapes(codes, sim)?;
    let b = codes.rows();
    let k = codes.cols();

    // sigma(Theta_ij) cached for the gradient pass.
    let mut sig = vec![0.0; b * b];
    let mut value = 0.0;
    for i in 0..b {
        let hi = codes.row(i);
        for j in 0..b {
            let theta = 0.5 * dot(hi, codes.row(j));
            value += softplus(theta) - f64::from(sim.get(i, j)) * theta;
            sig[i * b + j] = sigmoid(theta);
        }
    }

    let mut grad = Matrix::zeros(b, k);
    for i in 0..b {
        let gi = grad.row_mut(i);
        for j in 0..b {
            // h_i appears in Theta_ij and Theta_ji; each carries a 1/2 from
            // the definition of Theta.
            let c = 0.5
                * ((sig[i * b + j] - f64::from(sim.get(i, j)))
                    + (sig[j * b + i] - f64::from(sim.get(j, i))));
            if c == 0.0 {
                continue;
            }
            let hj = codes.row(j);
            for t in 0..k {
                gi[t] += c * hj[t];
            }
        }
    }
    Ok((value, grad))
}

/// L2 quantization: `sum_ik (h - sign(h))^2`, gradient `2 (h - sign(h))`.
pub fn l2_quantization(codes: &Matrix) -> Result<(f64, Matrix)> {
    check_codes(codes)?;
    let mut value = 0.0;
    let grad = codes.map(|h| {
        let d = h - sign_pm(h);
        2.0 * d
    });
    for &h in codes.data() {
        let d = h - sign_pm(h);
        value += d * d;
    }
    Ok((value, grad))
}

/// Log-cosh quantization: `sum_ik log cosh(|h| - 1)`.
///
/// Gradient: `tanh(|h| - 1) * sign(h)`, with `sign(0) = +1`.
pub fn logcosh_quantization(codes: &Matrix) -> Result<(f64, Matrix)> {
    check_codes(codes)?;
    let mut value = 0.0;
    for &h in codes.data() {
        value += ln_cosh(h.abs() - 1.0);
    }
    let grad = codes.map(|h| (h.abs() - 1.0).tanh() * sign_pm(h));
    Ok((value, grad))
}

/// Overflow-safe `ln(cosh(x))`.
#[inline]
fn ln_cosh(x: f64) -> f64 {
    x.abs() + (-2.0 * x.abs()).exp().ln_1p() - std::f64::consts::LN_2
}

/// Pair-bits picked up by the error-aware quantizer: for each unordered pair
/// `(i, j)`, `i < j`, and bit `k`, selected iff the bit signs already agree
/// with the pair's similarity label (equal signs for similar pairs, opposite
/// signs for dissimilar ones).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EaqSelection {
    batch: usize,
    bits: usize,
    mask: Vec<bool>,
}

impl EaqSelection {
    fn empty(batch: usize, bits: usize) -> Self {
        EaqSelection {
            batch,
            bits,
            mask: vec![false; batch * batch * bits],
        }
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, k: usize) {
        self.mask[(i * self.batch + j) * self.bits + k] = true;
    }

    /// Whether pair-bit `(i, j, k)` is selected. Order-insensitive; self
    /// pairs are never selected.
    pub fn selected(&self, i: usize, j: usize, k: usize) -> bool {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        self.mask[(lo * self.batch + hi) * self.bits + k]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }
}

/// Error-aware quantization over unordered pairs (self pairs excluded).
///
/// Selected pair-bits contribute the squared distance of both endpoints to
/// their sign targets; everything else contributes nothing and is left to
/// the similarity loss. Selection happens first, then value and gradient are
/// accumulated from the selection.
pub fn eaq_quantization(
    codes: &Matrix,
    sim: &SimilarityBlock,
) -> Result<(f64, Matrix, EaqSelection)> {
    check_pair_shapes(codes, sim)?;
    let b = codes.rows();
    let k = codes.cols();

    let mut selection = EaqSelection::empty(b, k);
    for i in 0..b {
        let hi = codes.row(i);
        for j in i + 1..b {
            let hj = codes.row(j);
            let similar = sim.get(i, j) == 1;
            for t in 0..k {
                let agree = sign_pm(hi[t]) == sign_pm(hj[t]);
                if agree == similar {
                    selection.set(i, j, t);
                }
            }
        }
    }

    let mut value = 0.0;
    let mut grad = Matrix::zeros(b, k);
    for i in 0..b {
        for j in i + 1..b {
            for t in 0..k {
                if !selection.selected(i, j, t) {
                    continue;
                }
                let (hi, hj) = (codes.get(i, t), codes.get(j, t));
                let di = hi - sign_pm(hi);
                let dj = hj - sign_pm(hj);
                value += di * di + dj * dj;
                grad.set(i, t, grad.get(i, t) + 2.0 * di);
                grad.set(j, t, grad.get(j, t) + 2.0 * dj);
            }
        }
    }
    Ok((value, grad, selection))
}

/// Result of `combined_loss`: the decomposed value, the exact gradient
/// w.r.t. the codes, and the quantizer selection when the error-aware
/// quantizer ran.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub value: LossValue,
    pub grad: Matrix,
    pub eaq_selection: Option<EaqSelection>,
}

/// Similarity loss plus the eta-weighted configured quantizer.
pub fn combined_loss(
    codes: &Matrix,
    sim: &SimilarityBlock,
    quantizer: QuantizerKind,
    eta: f64,
) -> Result<CombinedLoss> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::config("eta must be nonnegative and finite"));
    }
    // Quantizer selection runs before the loss value is assembled.
    let quant = match quantizer {
        QuantizerKind::L2 => {
            let (v, g) = l2_quantization(codes)?;
            Some((v, g, None))
        }
        QuantizerKind::LogCosh => {
            let (v, g) = logcosh_quantization(codes)?;
            Some((v, g, None))
        }
        QuantizerKind::Eaq => {
            let (v, g, sel) = eaq_quantization(codes, sim)?;
            Some((v, g, Some(sel)))
        }
        QuantizerKind::None => None,
    };

    let (sim_value, mut grad) = similarity_loss(codes, sim)?;
    let (quant_value, eaq_selection) = match quant {
        Some((v, g, sel)) => {
            grad.axpy(eta, &g);
            (v, sel)
        }
        None => (0.0, None),
    };

    Ok(CombinedLoss {
        value: LossValue::compose(sim_value, quant_value, eta),
        grad,
        eaq_selection,
    })
}
