use std::collections::VecDeque;

/// The last `len` observations, oldest first. Slots without history are
/// zero-filled and flagged invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    len: usize,
    obs_dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl ContextWindow {
    pub fn new(len: usize, obs_dim: usize) -> Self {
        Self {
            len: len.max(1),
            obs_dim,
            entries: VecDeque::with_capacity(len.max(1)),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn push(&mut self, obs: &[f64]) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        if self.entries.len() == self.len {
            self.entries.pop_front();
        }
        self.entries.push_back(obs.to_vec());
    }

    /// Most recent observation, if any.
    pub fn latest(&self) -> Option<&[f64]> {
        self.entries.back().map(Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Per-slot width of the flattened encoding: a validity flag plus the observation.
    pub fn slot_width(obs_dim: usize) -> usize {
        obs_dim + 1
    }

    /// Width of [`ContextWindow::encode`].
    pub fn encoded_width(len: usize, obs_dim: usize) -> usize {
        len.max(1) * Self::slot_width(obs_dim)
    }

    /// `[flag, obs...]` per slot, oldest first, front-padded with invalid slots.
    pub fn encode(&self) -> Vec<f64> {
        let w = Self::slot_width(self.obs_dim);
        let mut out = vec![0.0; self.len * w];
        let pad = self.len - self.entries.len();
        for (i, e) in self.entries.iter().enumerate() {
            let base = (pad + i) * w;
            out[base] = 1.0;
            out[base + 1..base + w].copy_from_slice(e);
        }
        out
    }

    pub fn valid_flags(&self) -> Vec<bool> {
        let pad = self.len - self.entries.len();
        (0..self.len).map(|i| i >= pad).collect()
    }
}

/// Window over the tail of `history`.
pub fn build_context(history: &[Vec<f64>], len: usize, obs_dim: usize) -> ContextWindow {
    let mut w = ContextWindow::new(len, obs_dim);
    let start = history.len().saturating_sub(w.len);
    for h in &history[start..] {
        w.push(h);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64, -(i as f64)]).collect()
    }

    #[test]
    fn long_history_keeps_last_entries() {
        let w = build_context(&hist(7), 3, 2);
        let got: Vec<_> = w.entries().map(|e| e[0]).collect();
        assert_eq!(got, vec![4.0, 5.0, 6.0]);
        assert_eq!(w.valid_flags(), vec![true; 3]);
    }

    #[test]
    fn empty_history_is_all_padding() {
        let w = build_context(&[], 4, 2);
        assert_eq!(w.valid_flags(), vec![false; 4]);
        assert!(w.encode().iter().all(|&v| v == 0.0));
        assert!(w.latest().is_none());
    }

    #[test]
    fn push_shifts_by_one() {
        let mut w = build_context(&hist(5), 3, 2);
        let before: Vec<_> = w.entries().map(|e| e[0]).collect();
        w.push(&[9.0, -9.0]);
        let after: Vec<_> = w.entries().map(|e| e[0]).collect();
        assert_eq!(&after[..2], &before[1..]);
        assert_eq!(w.latest(), Some(&[9.0, -9.0][..]));
    }

    #[test]
    fn short_history_front_padded() {
        let w = build_context(&hist(1), 3, 2);
        assert_eq!(w.encode(), vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.0]);
    }
}
