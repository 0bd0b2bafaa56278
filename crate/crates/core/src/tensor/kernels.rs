//! Plain slice kernels shared by forward and backward passes.
//!
//! All kernels accumulate in a fixed order so results are bit-reproducible.

/// out[m×n] += a[m×k] · b[k×n]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators; fixed association order
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn transpose(r: usize, c: usize, data: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

/// Geometry of a 2-D convolution over a single C×H×W input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding.0 - self.kh) / self.stride.0 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding.1 - self.kw) / self.stride.1 + 1
    }

    pub fn cin_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    /// Rows of one group's column matrix.
    pub fn col_rows(&self) -> usize {
        self.cin_per_group() * self.kh * self.kw
    }
}

/// Unfold the channels of group `g` into a (cin_g·kh·kw) × (oh·ow) matrix.
pub fn im2col(geom: &ConvGeom, input: &[f64], g: usize) -> Vec<f64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cpg = geom.cin_per_group();
    let mut cols = vec![0.0; geom.col_rows() * oh * ow];
    for ci in 0..cpg {
        let c = g * cpg + ci;
        let plane = &input[c * geom.in_h * geom.in_w..(c + 1) * geom.in_h * geom.in_w];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (ci * geom.kh + ki) * geom.kw + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride.0 + ki) as isize - geom.padding.0 as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * geom.in_w..(iy as usize + 1) * geom.in_w];
                    for ox in 0..ow {
                        let ix = (ox * geom.stride.1 + kj) as isize - geom.padding.1 as isize;
                        if ix >= 0 && ix < geom.in_w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix of group `g` back into the input gradient.
pub fn col2im(geom: &ConvGeom, cols: &[f64], g: usize, grad_input: &mut [f64]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cpg = geom.cin_per_group();
    for ci in 0..cpg {
        let c = g * cpg + ci;
        let plane = &mut grad_input[c * geom.in_h * geom.in_w..(c + 1) * geom.in_h * geom.in_w];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (ci * geom.kh + ki) * geom.kw + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride.0 + ki) as isize - geom.padding.0 as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride.1 + kj) as isize - geom.padding.1 as isize;
                        if ix >= 0 && ix < geom.in_w as isize {
                            plane[iy as usize * geom.in_w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one contiguous run of values.
pub fn softmax_slice(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, &b, &mut c);
        let bt = transpose(3, 2, &b);
        let mut c2 = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c2);
        let at = transpose(2, 3, &a);
        let mut c3 = [0.0; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut c3);
        assert_eq!(c, [-1.0, 7.5, -1.0, 18.0]);
        assert_eq!(c, c2);
        assert_eq!(c, c3);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
