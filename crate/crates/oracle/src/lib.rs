//! Reference formulas for the grouped losses, written as naive nested loops
//! with unstabilized `exp` and direct ratios.
//!
//! Nothing here is shared with `glass-core`; inputs are plain nested `Vec`s.
//! Every formula is generic over [`Real`] so it can run in `f64` or in
//! double-double precision ([`Dd`]), which is what the golden fixtures
//! and the high-precision central differences use.
//!
//! [`forge`] holds the brute-force counterparts of the dataset-forging steps.

pub mod forge;
pub mod retrieval;

use std::ops::{Add, Div, Mul, Neg, Sub};

/// `[group][pair][coordinate]`.
pub type Tensor3 = Vec<Vec<Vec<f64>>>;

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`, about 106 bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        // Long division with two correction quotients.
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from_f64(q3)
    }
}

const EXP_TERMS: usize = 27;

fn inverse_factorials() -> &'static [Dd; EXP_TERMS + 1] {
    static TABLE: std::sync::OnceLock<[Dd; EXP_TERMS + 1]> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [Dd::from_f64(1.0); EXP_TERMS + 1];
        for n in 1..=EXP_TERMS {
            t[n] = t[n - 1] / Dd::from_f64(n as f64);
        }
        t
    })
}

const LN2: Dd = Dd::new(std::f64::consts::LN_2, 2.319046813846299558e-17);

impl Real for Dd {
    fn from_f64(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
    fn exp(self) -> Self {
        let k = (self.hi / LN2.hi).round();
        // self = k ln2 + r with |r| ≤ ln2/2; r is scaled by 2^-4 for the
        // series and the result squared back up.
        let r = (self - LN2 * Dd::from_f64(k)) * Dd::from_f64(1.0 / 16.0);
        let inv = inverse_factorials();
        let mut sum = inv[EXP_TERMS];
        for c in inv[..EXP_TERMS].iter().rev() {
            sum = sum * r + *c;
        }
        for _ in 0..4 {
            sum = sum * sum;
        }
        sum * Dd::from_f64(2f64.powi(k as i32))
    }
    fn ln(self) -> Self {
        let mut y = Dd::from_f64(self.hi.ln());
        // Newton on exp(y) = x; each step doubles the correct digits.
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::from_f64(1.0);
        }
        y
    }
    fn sqrt(self) -> Self {
        let y = Dd::from_f64(self.hi.sqrt());
        y + (self - y * y) / (Dd::from_f64(2.0) * y)
    }
}

type V<R> = Vec<R>;

fn lift<R: Real>(t: &Tensor3) -> Vec<Vec<V<R>>> {
    t.iter()
        .map(|g| g.iter().map(|v| v.iter().map(|&x| R::from_f64(x)).collect()).collect())
        .collect()
}

fn zero<R: Real>() -> R {
    R::from_f64(0.0)
}

fn cos<R: Real>(x: &[R], y: &[R]) -> R {
    let mut xy = zero::<R>();
    let mut xx = zero::<R>();
    let mut yy = zero::<R>();
    for k in 0..x.len() {
        xy = xy + x[k] * y[k];
        xx = xx + x[k] * x[k];
        yy = yy + y[k] * y[k];
    }
    xy / (xx.sqrt() * yy.sqrt())
}

fn hadamard<R: Real>(x: &[R], y: &[R]) -> V<R> {
    x.iter().zip(y).map(|(a, b)| *a * *b).collect()
}

fn mean<R: Real>(vs: &[V<R>]) -> V<R> {
    let n = R::from_f64(vs.len() as f64);
    (0..vs[0].len())
        .map(|k| {
            let mut s = zero::<R>();
            for v in vs {
                s = s + v[k];
            }
            s / n
        })
        .collect()
}

/// Loss selector for [`value`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    PairwiseOuter,
    PairwiseInner,
    Pairwise,
    CentroidOuter,
    CentroidInner,
    Centroid,
    InfoNce,
}

#[derive(Debug, Clone, Copy)]
pub struct Params {
    pub tau: f64,
    pub tau_inner: f64,
    pub alpha: f64,
}

pub fn value<R: Real>(loss: Loss, images: &Tensor3, texts: &Tensor3, p: Params) -> R {
    let i = lift::<R>(images);
    let t = lift::<R>(texts);
    value_lifted(loss, &i, &t, p)
}

fn value_lifted<R: Real>(loss: Loss, i: &[Vec<V<R>>], t: &[Vec<V<R>>], p: Params) -> R {
    let a = R::from_f64(p.alpha);
    let one_minus_a = R::from_f64(1.0 - p.alpha);
    match loss {
        Loss::PairwiseOuter => pairwise_outer(i, t, p.tau),
        Loss::PairwiseInner => pairwise_inner(i, t, p.tau_inner),
        Loss::Pairwise => a * pairwise_inner(i, t, p.tau_inner) + one_minus_a * pairwise_outer(i, t, p.tau),
        Loss::CentroidOuter => centroid_outer(i, t, p.tau),
        Loss::CentroidInner => centroid_inner(i, t, p.tau_inner),
        Loss::Centroid => a * centroid_inner(i, t, p.tau_inner) + one_minus_a * centroid_outer(i, t, p.tau),
        Loss::InfoNce => {
            let flat_i: Vec<V<R>> = i.iter().flatten().cloned().collect();
            let flat_t: Vec<V<R>> = t.iter().flatten().cloned().collect();
            infonce(&flat_i, &flat_t, p.tau)
        }
    }
}

fn exp_sim_matrix<R: Real>(rows: &[V<R>], cols: &[V<R>], tau: R) -> Vec<V<R>> {
    rows.iter().map(|x| cols.iter().map(|y| (cos(x, y) / tau).exp()).collect()).collect()
}

fn pairwise_outer<R: Real>(img: &[Vec<V<R>>], txt: &[Vec<V<R>>], tau: f64) -> R {
    let m = img.len();
    let n = img[0].len();
    let flat_i: Vec<V<R>> = img.iter().flatten().cloned().collect();
    let flat_t: Vec<V<R>> = txt.iter().flatten().cloned().collect();
    // e[a][b] = exp(s(I_a, T_b)/τ) with a = g·N + i.
    let e = exp_sim_matrix(&flat_i, &flat_t, R::from_f64(tau));
    let mut total = zero::<R>();
    for g in 0..m {
        for i in 0..n {
            let a = g * n + i;
            let (mut num_row, mut num_col) = (zero::<R>(), zero::<R>());
            for j in 0..n {
                num_row = num_row + e[a][g * n + j];
                num_col = num_col + e[g * n + j][a];
            }
            let (mut den_row, mut den_col) = (zero::<R>(), zero::<R>());
            for b in 0..m * n {
                den_row = den_row + e[a][b];
                den_col = den_col + e[b][a];
            }
            total = total - (num_row / den_row).ln() - (num_col / den_col).ln();
        }
    }
    total / R::from_f64((2 * m * n) as f64)
}

/// Joint centroid as the literal `1/N² ΣΣ I_i ⊙ T_j`.
fn joint_centroid<R: Real>(img: &[V<R>], txt: &[V<R>]) -> V<R> {
    let n = img.len();
    let mut acc = vec![zero::<R>(); img[0].len()];
    for a in img {
        for b in txt {
            for k in 0..acc.len() {
                acc[k] = acc[k] + a[k] * b[k];
            }
        }
    }
    let nn = R::from_f64((n * n) as f64);
    acc.into_iter().map(|v| v / nn).collect()
}

fn pairwise_inner<R: Real>(img: &[Vec<V<R>>], txt: &[Vec<V<R>>], tau: f64) -> R {
    let m = img.len();
    let n = img[0].len();
    let tau = R::from_f64(tau);
    let mus: Vec<V<R>> = (0..m).map(|g| joint_centroid(&img[g], &txt[g])).collect();
    let mut total = zero::<R>();
    for g in 0..m {
        for i in 0..n {
            for j in 0..n {
                let c = hadamard(&img[g][i], &txt[g][j]);
                let num = (cos(&c, &mus[g]) / tau).exp();
                let mut den = zero::<R>();
                for mu in &mus {
                    den = den + (cos(&c, mu) / tau).exp();
                }
                total = total - (num / den).ln();
            }
        }
    }
    total / R::from_f64((m * n * n) as f64)
}

fn centroid_outer<R: Real>(img: &[Vec<V<R>>], txt: &[Vec<V<R>>], tau: f64) -> R {
    let m = img.len();
    let tau = R::from_f64(tau);
    let mi: Vec<V<R>> = img.iter().map(|g| mean(g)).collect();
    let mt: Vec<V<R>> = txt.iter().map(|g| mean(g)).collect();
    let mut total = zero::<R>();
    for g in 0..m {
        let num = (cos(&mi[g], &mt[g]) / tau).exp();
        let mut den_t = zero::<R>();
        let mut den_i = zero::<R>();
        for h in 0..m {
            den_t = den_t + (cos(&mi[g], &mt[h]) / tau).exp();
            den_i = den_i + (cos(&mi[h], &mt[g]) / tau).exp();
        }
        total = total - (num / den_t).ln() - (num / den_i).ln();
    }
    total / R::from_f64((2 * m) as f64)
}

fn centroid_inner<R: Real>(img: &[Vec<V<R>>], txt: &[Vec<V<R>>], tau: f64) -> R {
    let m = img.len();
    let n = img[0].len();
    let tau = R::from_f64(tau);
    let mi: Vec<V<R>> = img.iter().map(|g| mean(g)).collect();
    let mt: Vec<V<R>> = txt.iter().map(|g| mean(g)).collect();
    let mut total = zero::<R>();
    for g in 0..m {
        for i in 0..n {
            let mut den = zero::<R>();
            for mu in &mi {
                den = den + (cos(&img[g][i], mu) / tau).exp();
            }
            total = total - ((cos(&img[g][i], &mi[g]) / tau).exp() / den).ln();
            let mut den = zero::<R>();
            for mu in &mt {
                den = den + (cos(&txt[g][i], mu) / tau).exp();
            }
            total = total - ((cos(&txt[g][i], &mt[g]) / tau).exp() / den).ln();
        }
    }
    total / R::from_f64((2 * m * n) as f64)
}

fn infonce<R: Real>(img: &[V<R>], txt: &[V<R>], tau: f64) -> R {
    let k = img.len();
    let e = exp_sim_matrix(img, txt, R::from_f64(tau));
    let mut total = zero::<R>();
    for i in 0..k {
        let (mut den_row, mut den_col) = (zero::<R>(), zero::<R>());
        for j in 0..k {
            den_row = den_row + e[i][j];
            den_col = den_col + e[j][i];
        }
        total = total - (e[i][i] / den_row).ln() - (e[i][i] / den_col).ln();
    }
    total / R::from_f64((2 * k) as f64)
}

/// Central differences with step `h`, every loss evaluation carried out in
/// double-double precision. Returns `(∂/∂images, ∂/∂texts)`.
pub fn central_difference(loss: Loss, images: &Tensor3, texts: &Tensor3, p: Params, h: f64) -> (Tensor3, Tensor3) {
    let mut img = lift::<Dd>(images);
    let mut txt = lift::<Dd>(texts);
    let step = Dd::from_f64(h);
    let two_h = Dd::from_f64(2.0 * h);
    let mut out = [images.clone(), texts.clone()];
    for modality in 0..2 {
        for g in 0..images.len() {
            for i in 0..images[g].len() {
                for k in 0..images[g][i].len() {
                    let original = get(&img, &txt, modality, g, i, k);
                    set(&mut img, &mut txt, modality, g, i, k, original + step);
                    let plus = value_lifted(loss, &img, &txt, p);
                    set(&mut img, &mut txt, modality, g, i, k, original - step);
                    let minus = value_lifted(loss, &img, &txt, p);
                    set(&mut img, &mut txt, modality, g, i, k, original);
                    out[modality][g][i][k] = ((plus - minus) / two_h).to_f64();
                }
            }
        }
    }
    let [a, b] = out;
    (a, b)
}

type T3<R> = Vec<Vec<V<R>>>;

fn get<R: Real>(img: &T3<R>, txt: &T3<R>, modality: usize, g: usize, i: usize, k: usize) -> R {
    if modality == 0 {
        img[g][i][k]
    } else {
        txt[g][i][k]
    }
}

fn set<R: Real>(img: &mut T3<R>, txt: &mut T3<R>, modality: usize, g: usize, i: usize, k: usize, v: R) {
    if modality == 0 {
        img[g][i][k] = v;
    } else {
        txt[g][i][k] = v;
    }
}
