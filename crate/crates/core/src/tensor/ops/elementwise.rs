use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with negative slope 0.2.
    LeakyRelu,
    Sigmoid,
    Tanh,
    Abs,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Abs => "abs",
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::of(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Abs => x.abs(),
        }
    }

    /// Local derivative from input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Abs => {
                if x >= T::zero() {
                    T::one()
                } else {
                    -T::one()
                }
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            "shape",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Sign with `sign(0) = +1`, used by the guarded ratio.
fn sign_pos<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn activate(self, act: Activation) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(|v| act.apply(v));
        let yk = y.clone();
        self.graph().push(
            act.name(),
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gi = g.clone();
                for ((gv, &xv), &yv) in gi.data_mut().iter_mut().zip(x.data()).zip(yk.data()) {
                    *gv *= act.derivative(xv, yv);
                }
                vec![Some(gi)]
            }),
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.activate(Activation::Relu)
    }

    pub fn leaky_relu(self) -> Var<'g, T> {
        self.activate(Activation::LeakyRelu)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.activate(Activation::Sigmoid)
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.activate(Activation::Tanh)
    }

    pub fn abs(self) -> Var<'g, T> {
        self.activate(Activation::Abs)
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.graph().push(
            "add",
            y,
            &[self, other],
            Box::new(|g, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            }),
        ))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.graph().push(
            "sub",
            y,
            &[self, other],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]),
        ))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph().push(
            "mul",
            y,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv).expect("shape")),
                    needs[1].then(|| g.zip_map(&a, |gv, av| gv * av).expect("shape")),
                ]
            }),
        ))
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("div", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x / y)?;
        Ok(self.graph().push(
            "div",
            y,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.zip_map(&b, |gv, bv| gv / bv).expect("shape"));
                let gb = needs[1].then(|| {
                    let mut out = g.clone();
                    for ((o, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        *o = -*o * av / (bv * bv);
                    }
                    out
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let y = self.value().map(|v| v * s);
        self.graph().push(
            "scale",
            y,
            &[self],
            Box::new(move |g, _| vec![Some(g.map(|v| v * s))]),
        )
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        let y = self.value().map(|v| v + s);
        self.graph()
            .push("add_scalar", y, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Clamps into `[lo, hi]`; gradient passes where the input lies inside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(|v| v.max(lo).min(hi));
        self.graph().push(
            "clamp",
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gi = g.clone();
                for (gv, &xv) in gi.data_mut().iter_mut().zip(x.data()) {
                    if xv < lo || xv > hi {
                        *gv = T::zero();
                    }
                }
                vec![Some(gi)]
            }),
        )
    }

    /// Elementwise `|num / (den + eps * sign(den))|` with `sign(0) = +1`.
    pub fn abs_ratio(self, den: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), den.value());
        same_shape("abs_ratio", &a, &b)?;
        let y = a.zip_map(&b, |n, d| (n / (d + eps * sign_pos(d))).abs())?;
        Ok(self.graph().push(
            "abs_ratio",
            y,
            &[self, den],
            Box::new(move |g, needs| {
                let n = g.numel();
                let mut gn = needs[0].then(|| Tensor::zeros(g.shape()));
                let mut gd = needs[1].then(|| Tensor::zeros(g.shape()));
                for i in 0..n {
                    let (nv, dv) = (a.data()[i], b.data()[i]);
                    let d = dv + eps * sign_pos(dv);
                    let r = nv / d;
                    let s = sign_pos(r) * g.data()[i];
                    if let Some(t) = gn.as_mut() {
                        t.data_mut()[i] = s / d;
                    }
                    if let Some(t) = gd.as_mut() {
                        t.data_mut()[i] = -s * nv / (d * d);
                    }
                }
                vec![gn, gd]
            }),
        ))
    }
}
