//! Adaptive moment estimation with the usual decay constants and no weight
//! decay.

use hdgl_autodiff::{Matrix, ParamStore};

pub struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.ids().map(|id| Matrix::zeros(store.value(id).dim())).collect();
        let v = store.ids().map(|id| Matrix::zeros(store.value(id).dim())).collect();
        Adam {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update over every parameter with a gradient. `allowed`, when given,
    /// freezes parameters whose entry is false.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Matrix>],
        lr: f64,
        allowed: Option<&[bool]>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, id) in store.ids().enumerate().collect::<Vec<_>>() {
            if let Some(mask) = allowed {
                if !mask[idx] {
                    continue;
                }
            }
            let Some(g) = &grads[idx] else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(&(g * g) * (1.0 - self.beta2));
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hdgl_autodiff::Session;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::from_elem((1, 1), 3.0));
        let mut adam = Adam::new(&store);
        for _ in 0..400 {
            let mut sess = Session::new(&store);
            let xv = sess.param(x);
            let sq = sess.tape.mul(xv, xv);
            let loss = sess.tape.sum_all(sq);
            let grads = sess.backward(loss);
            let pg = sess.param_grads(&grads);
            adam.step(&mut store, &pg, 0.05, None);
        }
        assert!(store.value(x)[[0, 0]].abs() < 1e-2);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::from_elem((1, 1), 2.0));
        let b = store.add("b", Matrix::from_elem((1, 1), 2.0));
        let mut adam = Adam::new(&store);
        let mut sess = Session::new(&store);
        let (av, bv) = (sess.param(a), sess.param(b));
        let sum = sess.tape.add(av, bv);
        let loss = sess.tape.sum_all(sum);
        let grads = sess.backward(loss);
        let pg = sess.param_grads(&grads);
        adam.step(&mut store, &pg, 0.1, Some(&[true, false]));
        assert!(store.value(a)[[0, 0]] < 2.0);
        assert_eq!(store.value(b)[[0, 0]], 2.0);
    }
}
