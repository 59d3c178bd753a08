//! Minimal reverse-mode automatic differentiation for the model.

mod params;
mod tape;

pub use params::{Bound, ParamId, ParamStore};
pub use tape::{horner, horner_deriv, Gradients, Tape, Tensor, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect())
    }

    /// Compare reverse-mode gradients of a scalar function of `inputs` with
    /// central differences.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |inputs: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-6;
        for (a, t) in inputs.iter().enumerate() {
            let g = grads.get_or_zero(vars[a], t.len());
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[a].data[i] += h;
                let mut minus = inputs.clone();
                minus[a].data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                assert!(err < 1e-6, "input {a} entry {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn matmul_and_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 1, 2)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let s = t.square(m);
            t.sum_all(s)
        });
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(&mut rng, 2, 3), random(&mut rng, 2, 3)], |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.tanh(v[1]);
            let c = t.mul(a, b);
            let d = t.softplus(v[0]);
            let e = t.div(c, d);
            let f = t.exp(v[1]);
            let g = t.log(f);
            let h = t.sub(e, g);
            let i = t.relu(h);
            let j = t.clamp(v[0], -1.0, 1.0);
            let k = t.add(i, j);
            let k = t.scale(k, 0.7);
            let k = t.add_scalar(k, 2.0);
            let k = t.square(k);
            t.sum_all(k)
        });
    }

    #[test]
    fn reductions_and_reshapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 1, 1)], |t, v| {
            let tr = t.transpose(v[0]);
            let rs = t.sum_rows(tr);
            let cs = t.sum_cols(v[0]);
            let cs = t.reshape(cs, 1, 3);
            let sel = t.select_rows(v[0], &[2, 0, 2]);
            let sl = t.slice_cols(sel, 1, 3);
            let mr = t.mean_rows(sl);
            let cat = t.concat_cols(&[rs, cs, mr]);
            let catr = t.concat_rows(&[cat, cat]);
            let w = t.mul_const(catr, &(0..18).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
            let w = t.mul_scalar_var(w, v[1]);
            let w = t.square(w);
            let p = t.pick(w, 7);
            let s = t.sum_all(w);
            t.add(s, p)
        });
    }

    #[test]
    fn masked_log_softmax_and_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&mut rng, 3, 6)], |t, v| {
            let g = t.gather(v[0], &[(0, 1, 0), (1, 0, 0), (1, 2, 2), (2, 1, 2), (2, 2, 1)], 2);
            let row = t.reshape(g, 1, 6);
            let lp = t.masked_log_softmax(row, &[true, false, true, true, false, true]);
            let a = t.pick(lp, 2);
            let b = t.pick(lp, 5);
            let b = t.scale(b, 0.3);
            t.add(a, b)
        });
    }

    #[test]
    fn polynomial_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(&mut rng, 5, 1), random(&mut rng, 1, 4)], |t, v| {
            let p = t.poly(v[0], v[1]);
            let d = t.poly_deriv(v[0], v[1]);
            let m = t.mul(p, d);
            t.sum_all(m)
        });
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::column(vec![1.5, -2.0]));
        let c = tape.leaf(Tensor::row(vec![2.0, 3.0]));
        let p = tape.poly(z, c);
        assert_eq!(tape.value(p).data, vec![6.5, -4.0]);
        let c2 = tape.leaf(Tensor::row(vec![0.0, 0.0, 1.0]));
        let d = tape.poly_deriv(z, c2);
        assert_eq!(tape.value(d).data, vec![3.0, -4.0]);
    }

    #[test]
    fn digest_tracks_bits() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::row(vec![0.0, 1.0]));
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.get_mut(a.id("w").unwrap()).data[0] = -0.0;
        assert_ne!(a.digest(), b.digest());
    }
}
