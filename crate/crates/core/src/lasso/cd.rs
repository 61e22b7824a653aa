//! Cyclic coordinate descent in covariance mode.
//!
//! Minimizes `(1/(2T)) ||y - X b||^2 + sum_j pen_j |b_j|` over the columns
//! allowed by `mask`, keeping `c = X^T (y - X b) / T` up to date with one
//! cached Gram column per coordinate that ever moves.

use super::gram::GramCache;

pub(crate) struct CdSettings {
    pub max_sweeps: usize,
    pub tol: f64,
    pub kkt_tol: f64,
}

pub(crate) struct CdOutcome {
    pub beta: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub kkt_violation: f64,
    pub objective: f64,
    pub history: Vec<f64>,
}

pub(crate) struct CdProblem<'p, 'g> {
    pub gram: &'p mut GramCache<'g>,
    pub xty: &'p [f64],
    pub yty: f64,
    pub normalizer: f64,
    pub penalty: &'p [f64],
    pub mask: &'p [bool],
}

#[inline]
pub(crate) fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

impl CdProblem<'_, '_> {
    fn exact_gradient(&mut self, beta: &[f64]) -> Vec<f64> {
        let t = self.normalizer;
        let mut c: Vec<f64> = self.xty.iter().map(|v| v / t).collect();
        for (k, &bk) in beta.iter().enumerate() {
            if bk != 0.0 {
                let col = self.gram.column(k);
                for (ci, g) in c.iter_mut().zip(col) {
                    *ci -= g * bk / t;
                }
            }
        }
        c
    }

    fn objective(&self, beta: &[f64], c: &[f64]) -> f64 {
        // ||r||^2 = y'y - b'X'y - T b'c
        let t = self.normalizer;
        let mut bxy = 0.0;
        let mut bc = 0.0;
        let mut pen = 0.0;
        for j in 0..beta.len() {
            if beta[j] != 0.0 {
                bxy += beta[j] * self.xty[j];
                bc += beta[j] * c[j];
                pen += self.penalty[j] * beta[j].abs();
            }
        }
        let rss = (self.yty - bxy - t * bc).max(0.0);
        rss / (2.0 * t) + pen
    }

    fn kkt_violation(&self, beta: &[f64], c: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..beta.len() {
            if !self.mask[j] {
                continue;
            }
            let v = if beta[j] != 0.0 {
                (c[j] - self.penalty[j] * beta[j].signum()).abs()
            } else {
                (c[j].abs() - self.penalty[j]).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    pub fn solve(&mut self, warm: Option<&[f64]>, settings: &CdSettings) -> CdOutcome {
        let p = self.gram.p();
        let t = self.normalizer;
        let mut beta = vec![0.0; p];
        if let Some(w) = warm {
            for j in 0..p {
                if self.mask[j] && self.gram.diag()[j] > 0.0 {
                    beta[j] = w[j];
                }
            }
        }
        let curv: Vec<f64> = self.gram.diag().iter().map(|d| d / t).collect();
        let mut c = self.exact_gradient(&beta);
        let mut history = vec![self.objective(&beta, &c)];
        let mut sweeps = 0;
        let mut converged = false;
        let mut kkt = f64::INFINITY;

        while sweeps < settings.max_sweeps {
            sweeps += 1;
            let mut max_change = 0.0f64;
            for j in 0..p {
                if !self.mask[j] || curv[j] <= 0.0 {
                    continue;
                }
                let old = beta[j];
                let z = c[j] + curv[j] * old;
                let new = soft_threshold(z, self.penalty[j]) / curv[j];
                if new != old {
                    let delta = new - old;
                    let col = self.gram.column(j);
                    for (ci, g) in c.iter_mut().zip(col) {
                        *ci -= g * delta / t;
                    }
                    beta[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            history.push(self.objective(&beta, &c));
            let scale = beta.iter().fold(1.0f64, |m, b| m.max(b.abs()));
            if max_change < settings.tol * scale {
                c = self.exact_gradient(&beta);
                kkt = self.kkt_violation(&beta, &c);
                if kkt <= settings.kkt_tol {
                    converged = true;
                    break;
                }
            }
        }
        let c = self.exact_gradient(&beta);
        if !converged {
            kkt = self.kkt_violation(&beta, &c);
        }
        let objective = self.objective(&beta, &c);
        CdOutcome {
            beta,
            sweeps,
            converged,
            kkt_violation: kkt,
            objective,
            history,
        }
    }
}
