use rand::Rng;

use crate::error::Result;
use crate::nn::{Builder, Conv2d, Session, RELU_GAIN};
use crate::tensor::{Conv2dOptions, Element, Var};

/// Kernel lengths of the four branches; each branch also dilates its 3×3 conv by this amount.
pub const BRANCH_SIZES: [usize; 4] = [1, 3, 5, 7];

#[derive(Clone, Debug)]
pub struct RfbBranch {
    pub n: usize,
    pub reduce: Conv2d,
    /// `n×1`
    pub vertical: Conv2d,
    /// `1×n`
    pub horizontal: Conv2d,
    /// 3×3 with dilation `n`.
    pub dilated: Conv2d,
}

impl RfbBranch {
    fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, n: usize, c: usize, cb: usize) -> Result<Self> {
        let mut b = b.sub(&format!("branch{n}"));
        let half = (n - 1) / 2;
        Ok(Self {
            n,
            reduce: Conv2d::pointwise(&mut b, "reduce", c, cb, 1.0)?,
            vertical: Conv2d::build(&mut b, "vertical", cb, cb, (n, 1), Conv2dOptions::default().padding2(half, 0), true, 1.0)?,
            horizontal: Conv2d::build(&mut b, "horizontal", cb, cb, (1, n), Conv2dOptions::default().padding2(0, half), true, 1.0)?,
            dilated: Conv2d::build(&mut b, "dilated", cb, cb, (3, 3), Conv2dOptions::default().padding(n).dilation(n), true, 1.0)?,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(s, x)?;
        let y = self.vertical.forward(s, y)?;
        let y = self.horizontal.forward(s, y)?;
        self.dilated.forward(s, y)
    }

    /// Receptive-field extent per axis, from composing the kernel supports.
    pub fn receptive_field(&self) -> usize {
        // reduce (1) + n-tap conv on this axis + dilated 3-tap spanning 2n + 1
        1 + (self.n - 1) + 2 * self.n
    }
}

/// Multi-branch context block on a skip connection; preserves shape.
#[derive(Clone, Debug)]
pub struct Rfb {
    pub branches: Vec<RfbBranch>,
    pub merge: Conv2d,
    pub shortcut: Conv2d,
}

impl Rfb {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, c: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let cb = (c / 4).max(1);
        let branches = BRANCH_SIZES
            .iter()
            .map(|&n| RfbBranch::build(&mut b, n, c, cb))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            merge: Conv2d::pointwise(&mut b, "merge", cb * branches.len(), c, RELU_GAIN)?,
            shortcut: Conv2d::pointwise(&mut b, "shortcut", c, c, RELU_GAIN)?,
            branches,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|br| br.forward(s, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = s.tape.concat(&outs, 1)?;
        let merged = self.merge.forward(s, cat)?;
        let short = self.shortcut.forward(s, x)?;
        let sum = s.tape.add(merged, short)?;
        s.tape.relu(sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rfb(c: usize) -> (ParamStore<f64>, Rfb) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r = Rfb::build(&mut Builder::new(&mut store, &mut rng), "rfb", c).unwrap();
        (store, r)
    }

    #[test]
    fn preserves_shape_and_zero() {
        let (store, r) = rfb(8);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = s.tape.constant(Tensor::randn([2, 8, 16, 12], 1.0, &mut rng));
        let y = r.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), &[2, 8, 16, 12]);
        for br in &r.branches {
            let yb = br.forward(&mut s, x).unwrap();
            assert_eq!(s.tape.shape(yb), &[2, 2, 16, 12]);
        }
        let z = s.tape.constant(Tensor::zeros([1, 8, 8, 8]));
        let y = r.forward(&mut s, z).unwrap();
        assert!(s.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_support_matches_kernel_composition() {
        let (mut store, r) = rfb(4);
        // positive weights so no taps cancel
        let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let fill = if n.ends_with("bias") { 0.0 } else { 1.0 };
            let t = store.params().find(|(k, _)| *k == n).unwrap().1.map(|_| fill);
            store.assign(&n, t).unwrap();
        }
        let size = 41;
        let mut img = Tensor::<f64>::zeros([1, 4, size, size]);
        img.data_mut()[(size / 2) * size + size / 2] = 1.0;
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let x = s.tape.constant(img);
        for br in &r.branches {
            let y = br.forward(&mut s, x).unwrap();
            let v = s.tape.value(y);
            let rows: Vec<usize> = (0..size).filter(|&i| (0..size).any(|j| v.at(&[0, 0, i, j]) != 0.0)).collect();
            let cols: Vec<usize> = (0..size).filter(|&j| (0..size).any(|i| v.at(&[0, 0, i, j]) != 0.0)).collect();
            let span = |ix: &[usize]| ix.last().unwrap() - ix.first().unwrap() + 1;
            // 1×1, then n taps on one axis, then three taps n apart
            assert_eq!(span(&rows), 3 * br.n, "branch {}", br.n);
            assert_eq!(span(&cols), 3 * br.n, "branch {}", br.n);
            assert_eq!(br.receptive_field(), 3 * br.n);
        }
        assert_eq!(r.branches[3].receptive_field(), 21);
    }
}
