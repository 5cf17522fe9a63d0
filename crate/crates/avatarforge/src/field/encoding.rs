//! Sinusoidal positional encoding with an analytic Jacobian.
//!
//! Input coordinates are passed through unchanged and augmented with
//! `sin`/`cos` pairs at octave frequencies `2^o * pi`. The Jacobian path
//! seeds the field network's forward-tangent pass, which is how spatial
//! SDF gradients are produced everywhere in the crate.

/// Encoding of a 3-vector: raw coords plus `octaves` sin/cos pairs per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosEncoding {
    pub octaves: u32,
}

impl PosEncoding {
    pub fn new(octaves: u32) -> Self {
        Self { octaves }
    }

    /// Output dimensionality for a 3-vector input.
    pub fn dim(&self) -> usize {
        3 + 3 * 2 * self.octaves as usize
    }

    /// Encode `p` into `out` (length `self.dim()`).
    ///
    /// Layout: `[x, y, z]` then per octave `[sin(wx), cos(wx), sin(wy),
    /// cos(wy), sin(wz), cos(wz)]`.
    pub fn encode(&self, p: [f32; 3], out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.dim());
        out[0] = p[0];
        out[1] = p[1];
        out[2] = p[2];
        let mut i = 3;
        for o in 0..self.octaves {
            let w = (1u32 << o) as f32 * std::f32::consts::PI;
            for &c in &p {
                let (s, cs) = (w * c).sin_cos();
                out[i] = s;
                out[i + 1] = cs;
                i += 2;
            }
        }
    }

    /// Encode and fill the three tangent columns `d(out)/d(p_k) * scale`.
    ///
    /// `tangents` is row-major `[k * dim .. (k + 1) * dim]` for k = 0..3.
    /// `scale` folds in the derivative of any prior normalization of `p`.
    pub fn encode_with_tangents(
        &self,
        p: [f32; 3],
        scale: f32,
        out: &mut [f32],
        tangents: &mut [f32],
    ) {
        let dim = self.dim();
        debug_assert_eq!(out.len(), dim);
        debug_assert_eq!(tangents.len(), 3 * dim);
        tangents.fill(0.0);
        out[0] = p[0];
        out[1] = p[1];
        out[2] = p[2];
        for k in 0..3 {
            tangents[k * dim + k] = scale;
        }
        let mut i = 3;
        for o in 0..self.octaves {
            let w = (1u32 << o) as f32 * std::f32::consts::PI;
            for (k, &c) in p.iter().enumerate() {
                let (s, cs) = (w * c).sin_cos();
                out[i] = s;
                out[i + 1] = cs;
                tangents[k * dim + i] = w * cs * scale;
                tangents[k * dim + i + 1] = -w * s * scale;
                i += 2;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dim_counts_channels() {
        assert_eq!(PosEncoding::new(6).dim(), 39);
        assert_eq!(PosEncoding::new(4).dim(), 27);
        assert_eq!(PosEncoding::new(0).dim(), 3);
    }

    #[test]
    fn tangents_match_finite_differences() {
        let enc = PosEncoding::new(5);
        let dim = enc.dim();
        let p = [0.31f32, -0.72, 0.11];
        let mut out = vec![0.0; dim];
        let mut tan = vec![0.0; 3 * dim];
        enc.encode_with_tangents(p, 1.0, &mut out, &mut tan);

        let h = 1e-3f32;
        for k in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[k] += h;
            pm[k] -= h;
            let mut ep = vec![0.0; dim];
            let mut em = vec![0.0; dim];
            enc.encode(pp, &mut ep);
            enc.encode(pm, &mut em);
            for j in 0..dim {
                let fd = (ep[j] - em[j]) / (2.0 * h);
                let an = tan[k * dim + j];
                assert!(
                    (fd - an).abs() < 2e-2 * an.abs().max(1.0),
                    "k={k} j={j}: fd={fd} analytic={an}"
                );
            }
        }
    }
}
