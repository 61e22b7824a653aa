use nalgebra::DVector;

use crate::proxy::WhitenedBlock;

/// Lazily computed columns of `X^T X` for a block-stored design.
///
/// Columns are assembled on first request by streaming over the blocks, so
/// memory grows with the number of distinct columns touched, not with `p^2`.
pub struct GramCache<'a> {
    blocks: &'a [WhitenedBlock],
    p: usize,
    diag: Vec<f64>,
    cols: Vec<Option<Vec<f64>>>,
}

impl<'a> GramCache<'a> {
    pub fn new(blocks: &'a [WhitenedBlock], p: usize) -> Self {
        let mut diag = vec![0.0; p];
        for b in blocks {
            for (j, d) in diag.iter_mut().enumerate() {
                let col = b.x.column(j);
                *d += col.dot(&col);
            }
        }
        Self {
            blocks,
            p,
            diag,
            cols: vec![None; p],
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn blocks(&self) -> &'a [WhitenedBlock] {
        self.blocks
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn column(&mut self, k: usize) -> &[f64] {
        if self.cols[k].is_none() {
            let mut acc = DVector::zeros(self.p);
            for b in self.blocks {
                acc.gemv_tr(1.0, &b.x, &b.x.column(k), 1.0);
            }
            self.cols[k] = Some(acc.data.into());
        }
        self.cols[k].as_deref().expect("column just computed")
    }

    /// `X^T y` for the stored response blocks.
    pub fn xty(&self) -> Vec<f64> {
        let mut acc = DVector::zeros(self.p);
        for b in self.blocks {
            acc.gemv_tr(1.0, &b.x, &b.y, 1.0);
        }
        acc.data.into()
    }

    pub fn yty(&self) -> f64 {
        self.blocks.iter().map(|b| b.y.dot(&b.y)).sum()
    }
}
