use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named tensor with an accumulated gradient. Non-trainable tensors
/// (normalization running statistics) carry no gradient and are skipped by
/// the optimizer, but are still checkpointed.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![0.0; n],
            grad: vec![0.0; n],
            shape: shape.to_vec(),
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("finite std");
            p.value.iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        p
    }

    pub fn buffer(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![v; n],
            grad: Vec::new(),
            shape: shape.to_vec(),
            trainable: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            s => panic!("tensor of shape {s:?} is not a matrix"),
        }
    }

    pub fn mat(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(self.dims2(), &self.value).expect("shape matches storage")
    }

    pub fn grad_mat_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let dims = self.dims2();
        ArrayViewMut2::from_shape(dims, &mut self.grad).expect("shape matches storage")
    }

    pub fn vec(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.value[..])
    }

    pub fn grad_vec_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.grad[..])
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns [`Param`]s. Visit order is stable and defines the
/// checkpoint layout and optimizer state alignment.
pub trait Parameterized {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}
