//! Prompt embedding: the token layout, the matrix `H` with its labeled,
//! unlabeled and reasoning column blocks, and readout of mean estimates.

use std::io::Write;
use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DVectorView};

use crate::error::{Error, Result};
use crate::task::TaskInstance;

/// Per-class mean estimates, column `i` is the estimate for class `i` (`d x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanEstimates(DMatrix<f64>);

impl MeanEstimates {
    pub fn new(columns: DMatrix<f64>) -> Self {
        MeanEstimates(columns)
    }

    pub fn zeros(d: usize, classes: usize) -> Self {
        MeanEstimates(DMatrix::zeros(d, classes))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn column(&self, i: usize) -> DVectorView<'_, f64> {
        self.0.column(i)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `||self - other||_F^2`.
    pub fn dist_sq(&self, other: &DMatrix<f64>) -> f64 {
        (&self.0 - other).norm_squared()
    }
}

/// Row map of a token. Every token is `(x, y, p)` with `x` in `R^d`,
/// `y` in `R^C` and `p` in `R^{d_p}` split into named slots:
///
/// | slot | rows | use |
/// |------|------|-----|
/// | A | C | class one-hot `e_i` of a reasoning token |
/// | B | d | mean estimate |
/// | C | C | posterior workspace |
/// | D | C | aggregation workspace |
/// | E | 1 | `-1/2 mu^T W mu` |
/// | F | 1 | labeled flag |
/// | G | 1 | unlabeled flag |
/// | H | 1 | CoT step index |
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub d: usize,
    pub classes: usize,
}

impl TokenLayout {
    pub fn new(d: usize, classes: usize) -> Result<Self> {
        if d == 0 || classes == 0 {
            return Err(Error::layout("d and C must be at least 1"));
        }
        Ok(TokenLayout { d, classes })
    }

    pub fn d_p(&self) -> usize {
        3 * self.classes + self.d + 4
    }

    /// Token height `D = d + C + d_p`.
    pub fn height(&self) -> usize {
        self.d + self.classes + self.d_p()
    }

    pub fn x(&self) -> Range<usize> {
        0..self.d
    }

    pub fn y(&self) -> Range<usize> {
        self.d..self.d + self.classes
    }

    fn p_start(&self) -> usize {
        self.d + self.classes
    }

    pub fn slot_a(&self) -> Range<usize> {
        let s = self.p_start();
        s..s + self.classes
    }

    pub fn slot_b(&self) -> Range<usize> {
        let s = self.slot_a().end;
        s..s + self.d
    }

    pub fn slot_c(&self) -> Range<usize> {
        let s = self.slot_b().end;
        s..s + self.classes
    }

    pub fn slot_d(&self) -> Range<usize> {
        let s = self.slot_c().end;
        s..s + self.classes
    }

    pub fn norm_row(&self) -> usize {
        self.slot_d().end
    }

    pub fn labeled_flag_row(&self) -> usize {
        self.norm_row() + 1
    }

    pub fn unlabeled_flag_row(&self) -> usize {
        self.norm_row() + 2
    }

    pub fn step_row(&self) -> usize {
        self.norm_row() + 3
    }

    /// `(name, rows)` for every slot, in row order.
    pub fn slots(&self) -> Vec<(&'static str, Range<usize>)> {
        let one = |r: usize| r..r + 1;
        vec![
            ("x", self.x()),
            ("y", self.y()),
            ("class", self.slot_a()),
            ("mean", self.slot_b()),
            ("gamma", self.slot_c()),
            ("agg", self.slot_d()),
            ("norm", one(self.norm_row())),
            ("labeled", one(self.labeled_flag_row())),
            ("unlabeled", one(self.unlabeled_flag_row())),
            ("step", one(self.step_row())),
        ]
    }

    /// One label per row of `H`, e.g. `x0`, `mean2`, `step`.
    pub fn row_labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.height());
        for (name, rows) in self.slots() {
            if rows.len() == 1 && !matches!(name, "x" | "y" | "class" | "mean" | "gamma" | "agg") {
                out.push(name.to_string());
            } else {
                out.extend((0..rows.len()).map(|k| format!("{name}{k}")));
            }
        }
        out
    }
}

/// Which block a column of `H` belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Labeled,
    Unlabeled,
    Reasoning,
}

/// The prompt matrix `H` (`D x L`) with `L = N + M_u + (t + 1) C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    h: DMatrix<f64>,
    layout: TokenLayout,
    n_labeled: usize,
    n_unlabeled: usize,
    t: usize,
}

impl PromptState {
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn n_labeled(&self) -> usize {
        self.n_labeled
    }

    pub fn n_unlabeled(&self) -> usize {
        self.n_unlabeled
    }

    /// Number of appended reasoning blocks.
    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn width(&self) -> usize {
        self.h.ncols()
    }

    pub fn token_kind(&self, col: usize) -> TokenKind {
        if col < self.n_labeled {
            TokenKind::Labeled
        } else if col < self.n_labeled + self.n_unlabeled {
            TokenKind::Unlabeled
        } else {
            TokenKind::Reasoning
        }
    }

    pub fn token_kinds(&self) -> Vec<TokenKind> {
        (0..self.width()).map(|c| self.token_kind(c)).collect()
    }

    fn block_start(&self, tau: usize) -> usize {
        self.n_labeled + self.n_unlabeled + tau * self.layout.classes
    }

    /// Columns of reasoning block `tau`.
    pub fn reasoning_block(&self, tau: usize) -> Result<DMatrixView<'_, f64>> {
        if tau > self.t {
            return Err(Error::Index(format!("step {tau} > last step {}", self.t)));
        }
        Ok(self.h.columns(self.block_start(tau), self.layout.classes))
    }

    /// Mean estimates stored in reasoning block `tau`.
    pub fn decode_means(&self, tau: usize) -> Result<MeanEstimates> {
        let block = self.reasoning_block(tau)?;
        let rows = self.layout.slot_b();
        Ok(MeanEstimates(block.rows(rows.start, rows.len()).into_owned()))
    }

    /// Append a `D x C` reasoning block. Existing columns are copied unchanged.
    pub fn append_reasoning(&self, block: &DMatrix<f64>) -> Result<PromptState> {
        let lay = &self.layout;
        if block.nrows() != lay.height() || block.ncols() != lay.classes {
            return Err(Error::Block(format!(
                "expected {}x{}, got {}x{}",
                lay.height(),
                lay.classes,
                block.nrows(),
                block.ncols()
            )));
        }
        let next = (self.t + 1) as f64;
        for i in 0..lay.classes {
            for (k, r) in lay.slot_a().enumerate() {
                let want = if k == i { 1.0 } else { 0.0 };
                if block[(r, i)] != want {
                    return Err(Error::Block(format!("class slot of column {i} is not e_{i}")));
                }
            }
            if block[(lay.step_row(), i)] != next {
                return Err(Error::Block(format!(
                    "column {i} has step {} but the next step is {next}",
                    block[(lay.step_row(), i)]
                )));
            }
        }
        let width = self.width();
        let mut h = self.h.clone().resize_horizontally(width + lay.classes, 0.0);
        h.columns_mut(width, lay.classes).copy_from(block);
        Ok(PromptState {
            h,
            layout: self.layout,
            n_labeled: self.n_labeled,
            n_unlabeled: self.n_unlabeled,
            t: self.t + 1,
        })
    }

    /// CSV dump with one line per token and one column per row of `H`.
    pub fn write_debug_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["token".to_string(), "kind".to_string()];
        header.extend(self.layout.row_labels());
        w.write_record(&header)?;
        for (c, col) in self.h.column_iter().enumerate() {
            let kind = match self.token_kind(c) {
                TokenKind::Labeled => "labeled",
                TokenKind::Unlabeled => "unlabeled",
                TokenKind::Reasoning => "reasoning",
            };
            let mut rec = vec![c.to_string(), kind.to_string()];
            rec.extend(col.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Store `-1/2 mu_i^T W mu_i` in the norm slot of every column of a reasoning block.
pub fn write_norm_slot(block: &mut DMatrix<f64>, layout: &TokenLayout, norm_form: &DMatrix<f64>) {
    let b = layout.slot_b();
    for i in 0..block.ncols() {
        let mu = block.view((b.start, i), (b.len(), 1)).into_owned();
        let u = -0.5 * (mu.transpose() * norm_form * &mu)[(0, 0)];
        block[(layout.norm_row(), i)] = u;
    }
}

/// A fresh reasoning block for step `tau` holding `means`, with workspace
/// rows zeroed and the norm slot filled in.
pub fn reasoning_block(
    layout: &TokenLayout,
    means: &MeanEstimates,
    tau: usize,
    norm_form: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if means.dim() != layout.d || means.classes() != layout.classes {
        return Err(Error::layout(format!(
            "means are {}x{}, layout expects {}x{}",
            means.dim(),
            means.classes(),
            layout.d,
            layout.classes
        )));
    }
    if norm_form.shape() != (layout.d, layout.d) {
        return Err(Error::layout("norm form must be d x d"));
    }
    let mut block = DMatrix::zeros(layout.height(), layout.classes);
    let a = layout.slot_a().start;
    let b = layout.slot_b().start;
    for i in 0..layout.classes {
        block[(a + i, i)] = 1.0;
        block[(layout.step_row(), i)] = tau as f64;
    }
    block
        .view_mut((b, 0), (layout.d, layout.classes))
        .copy_from(means.as_matrix());
    write_norm_slot(&mut block, layout, norm_form);
    Ok(block)
}

/// Build `H` for an instance: labeled tokens, unlabeled tokens, and the
/// zero-estimate reasoning block at step 0.
pub fn encode_instance(instance: &TaskInstance, layout: &TokenLayout) -> Result<PromptState> {
    if instance.dim() != layout.d || instance.classes() != layout.classes {
        return Err(Error::layout(format!(
            "instance has d = {}, C = {}; layout has d = {}, C = {}",
            instance.dim(),
            instance.classes(),
            layout.d,
            layout.classes
        )));
    }
    let n = instance.n_labeled();
    let m = instance.n_unlabeled();
    let width = n + m + layout.classes;
    let mut h = DMatrix::zeros(layout.height(), width);
    h.view_mut((0, 0), (layout.d, n)).copy_from(&instance.labeled_x);
    h.view_mut((0, n), (layout.d, m)).copy_from(&instance.unlabeled_x);
    let y0 = layout.y().start;
    for (j, y) in instance.labeled_y.iter().enumerate() {
        h[(y0 + y.class, j)] = 1.0;
        h[(layout.labeled_flag_row(), j)] = 1.0;
    }
    for j in n..n + m {
        h[(layout.unlabeled_flag_row(), j)] = 1.0;
    }
    let zero = MeanEstimates::zeros(layout.d, layout.classes);
    let block = reasoning_block(layout, &zero, 0, &DMatrix::zeros(layout.d, layout.d))?;
    h.columns_mut(n + m, layout.classes).copy_from(&block);
    Ok(PromptState {
        h,
        layout: *layout,
        n_labeled: n,
        n_unlabeled: m,
        t: 0,
    })
}
