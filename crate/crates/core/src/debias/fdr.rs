/// Benjamini-Hochberg step-up selection at false discovery rate `level`.
///
/// Returns the indices of rejected hypotheses in ascending order.
pub fn bh_fdr(p_values: &[f64], level: f64) -> Vec<usize> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let cutoff = order
        .iter()
        .enumerate()
        .filter(|(rank, &i)| p_values[i] <= level * (rank + 1) as f64 / m as f64)
        .map(|(rank, _)| rank + 1)
        .last()
        .unwrap_or(0);
    let mut selected: Vec<usize> = order[..cutoff].to_vec();
    selected.sort_unstable();
    selected
}
