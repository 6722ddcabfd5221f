//! Position-indexed tables for the three supported encodings.
//!
//! All three are looked up by position ID, so gaps and non-zero starts in a
//! sequence's position IDs need no special handling.

pub const ROPE_BASE: f64 = 10_000.0;

/// Precomputed `cos`/`sin` for every (position, frequency) pair.
#[derive(Debug, Clone)]
pub struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

fn rope_angle(pos: u32, pair: usize, head_dim: usize) -> f64 {
    let inv_freq = ROPE_BASE.powf(-2.0 * pair as f64 / head_dim as f64);
    pos as f64 * inv_freq
}

impl RopeTable {
    pub fn new(head_dim: usize, max_position: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_position * half);
        let mut sin = Vec::with_capacity(max_position * half);
        for pos in 0..max_position {
            for pair in 0..half {
                let a = rope_angle(pos as u32, pair, head_dim);
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates consecutive pairs `(x[2i], x[2i+1])` of one head vector.
    pub fn rotate(&self, x: &mut [f32], pos: u32) {
        let base = pos as usize * self.half;
        let cos = &self.cos[base..base + self.half];
        let sin = &self.sin[base..base + self.half];
        for (i, pair) in x.chunks_exact_mut(2).enumerate() {
            let (a, b) = (f64::from(pair[0]), f64::from(pair[1]));
            pair[0] = (a * cos[i] - b * sin[i]) as f32;
            pair[1] = (a * sin[i] + b * cos[i]) as f32;
        }
    }
}

impl RopeTable {
    /// `rotate(q, q_pos) · rotate(k, k_pos)` for one head, computed from the
    /// relative offset `q_pos - k_pos` so it depends on nothing else.
    pub fn score(&self, q: &[f32], k: &[f32], offset: i64) -> f64 {
        let base = offset.unsigned_abs() as usize * self.half;
        let cos = &self.cos[base..base + self.half];
        let sin = &self.sin[base..base + self.half];
        let sign = if offset < 0 { -1.0 } else { 1.0 };
        let mut acc = [0.0f64; 2];
        for (i, (qp, kp)) in q.chunks_exact(2).zip(k.chunks_exact(2)).enumerate() {
            let (a, b) = (f64::from(qp[0]), f64::from(qp[1]));
            let (c, e) = (f64::from(kp[0]), f64::from(kp[1]));
            acc[i % 2] += (a * c + b * e) * cos[i] + sign * (a * e - b * c) * sin[i];
        }
        acc[0] + acc[1]
    }
}

/// Rotation computed from the angle formula without the table.
pub fn rope_rotate_direct(x: &mut [f32], pos: u32) {
    let head_dim = x.len();
    for (i, pair) in x.chunks_exact_mut(2).enumerate() {
        let a = rope_angle(pos, i, head_dim);
        let (c, s) = (a.cos(), a.sin());
        let (x0, x1) = (f64::from(pair[0]), f64::from(pair[1]));
        pair[0] = (x0 * c - x1 * s) as f32;
        pair[1] = (x0 * s + x1 * c) as f32;
    }
}

/// ALiBi head slopes: the geometric sequence `2^(-8/n)`, extended the usual
/// way when `n` is not a power of two.
pub fn alibi_slopes(n_heads: usize) -> Vec<f32> {
    fn pow2_slopes(n: usize) -> Vec<f64> {
        let start = 2f64.powf(-8.0 / n as f64);
        (0..n).map(|i| start.powi(i as i32 + 1)).collect()
    }
    let closest = 1usize << (usize::BITS - 1 - n_heads.leading_zeros());
    let mut slopes = pow2_slopes(closest);
    if closest < n_heads {
        let extra = pow2_slopes(2 * closest);
        slopes.extend(extra.into_iter().step_by(2).take(n_heads - closest));
    }
    slopes.into_iter().map(|s| s as f32).collect()
}

/// Bias `slope(head) * (key_pos - query_pos)` indexed by position difference.
#[derive(Debug, Clone)]
pub struct AlibiTable {
    slopes: Vec<f32>,
    max_position: usize,
    /// `[head][diff + max_position - 1]`
    table: Vec<f32>,
}

impl AlibiTable {
    pub fn new(n_heads: usize, max_position: usize) -> Self {
        let slopes = alibi_slopes(n_heads);
        let width = 2 * max_position - 1;
        let mut table = Vec::with_capacity(n_heads * width);
        for &slope in &slopes {
            for i in 0..width {
                let diff = i as i64 - (max_position as i64 - 1);
                table.push(slope * diff as f32);
            }
        }
        Self {
            slopes,
            max_position,
            table,
        }
    }

    pub fn slope(&self, head: usize) -> f32 {
        self.slopes[head]
    }

    /// Row of biases for one head; index with `key_pos - query_pos + offset`.
    #[inline]
    pub(crate) fn head_row(&self, head: usize) -> &[f32] {
        let width = 2 * self.max_position - 1;
        &self.table[head * width..(head + 1) * width]
    }

    #[inline]
    pub(crate) fn offset(&self) -> i64 {
        self.max_position as i64 - 1
    }

    pub fn bias(&self, head: usize, query_pos: u32, key_pos: u32) -> f32 {
        let idx = key_pos as i64 - query_pos as i64 + self.offset();
        self.head_row(head)[idx as usize]
    }
}

/// Fixed sinusoidal position embeddings, `[max_position, hidden]`.
pub fn sinusoidal_table(hidden: usize, max_position: usize) -> Vec<f32> {
    let mut table = Vec::with_capacity(max_position * hidden);
    for pos in 0..max_position {
        for i in 0..hidden {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / hidden as f64);
            table.push(if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
        }
    }
    table
}
