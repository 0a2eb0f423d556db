use crate::error::{Error, Result};

/// Neighbor pairs for a gather–matmul–scatter convolution.
///
/// Each pair `(k, input_row, output_row)` says that input row contributes to
/// output row through kernel slice `k`. Pairs are stored twice, grouped by
/// output row (forward and kernel gradient) and by input row (input
/// gradient); both groupings keep ascending `k` within a row.
#[derive(Clone, Debug)]
pub struct ConvMap {
    n_in: usize,
    n_out: usize,
    kernel_volume: usize,
    out_ptr: Vec<usize>,
    out_entries: Vec<(u32, u32)>,
    in_ptr: Vec<usize>,
    in_entries: Vec<(u32, u32)>,
}

impl ConvMap {
    /// Builds the map from `(k, input_row, output_row)` triples in any order.
    pub fn from_pairs(
        n_in: usize,
        n_out: usize,
        kernel_volume: usize,
        pairs: &[(usize, usize, usize)],
    ) -> Result<Self> {
        for &(k, i, o) in pairs {
            if k >= kernel_volume || i >= n_in || o >= n_out {
                return Err(Error::Contract(format!(
                    "conv pair ({k}, {i}, {o}) outside ({kernel_volume}, {n_in}, {n_out})"
                )));
            }
        }
        let (out_ptr, out_entries) = group(n_out, pairs.iter().map(|&(k, i, o)| (o, k, i)));
        let (in_ptr, in_entries) = group(n_in, pairs.iter().map(|&(k, i, o)| (i, k, o)));
        Ok(Self {
            n_in,
            n_out,
            kernel_volume,
            out_ptr,
            out_entries,
            in_ptr,
            in_entries,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel_volume
    }

    pub fn pair_count(&self) -> usize {
        self.out_entries.len()
    }

    /// `(k, input_row)` pairs feeding output row `o`.
    pub fn inputs_of(&self, o: usize) -> &[(u32, u32)] {
        &self.out_entries[self.out_ptr[o]..self.out_ptr[o + 1]]
    }

    /// `(k, output_row)` pairs fed by input row `i`.
    pub fn outputs_of(&self, i: usize) -> &[(u32, u32)] {
        &self.in_entries[self.in_ptr[i]..self.in_ptr[i + 1]]
    }
}

fn group(
    rows: usize,
    items: impl Iterator<Item = (usize, usize, usize)>,
) -> (Vec<usize>, Vec<(u32, u32)>) {
    let mut items: Vec<(usize, usize, usize)> = items.collect();
    items.sort_unstable();
    let mut ptr = vec![0usize; rows + 1];
    for &(r, _, _) in &items {
        ptr[r + 1] += 1;
    }
    for r in 0..rows {
        ptr[r + 1] += ptr[r];
    }
    let entries = items
        .into_iter()
        .map(|(_, k, other)| (k as u32, other as u32))
        .collect();
    (ptr, entries)
}
