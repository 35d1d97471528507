//! Test oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use simseg::raster::BinaryMask;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Double-double number `hi + lo` with |lo| <= ulp(hi)/2.
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

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi));
        Dd { hi, lo }
    }

    pub fn mul_f(self, x: f64) -> Dd {
        self.mul(Dd::new(x))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f(q2));
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }.add(Dd::new(q3))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn exp(self) -> Dd {
        if self.hi == 0.0 {
            return Dd::new(1.0);
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = self.sub(Dd::LN2.mul_f(k));
        // exp(r) = exp(r / 2^10)^(2^10)
        let s = Dd {
            hi: r.hi / 1024.0,
            lo: r.lo / 1024.0,
        };
        let mut term = Dd::new(1.0);
        let mut sum = Dd::new(1.0);
        for n in 1..=14 {
            term = term.mul(s).div(Dd::new(n as f64));
            sum = sum.add(term);
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        let scale = 2f64.powi(k as i32);
        Dd {
            hi: sum.hi * scale,
            lo: sum.lo * scale,
        }
    }

    /// Natural logarithm by Newton steps on `exp`.
    pub fn ln(self) -> Dd {
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y.add(self.mul(y.neg().exp())).sub(Dd::new(1.0));
        }
        y
    }
}

pub fn dd_dot(a: &[f64], b: &[f64]) -> Dd {
    a.iter()
        .zip(b)
        .fold(Dd::ZERO, |acc, (x, y)| acc.add(Dd::new(*x).mul(Dd::new(*y))))
}

pub fn dd_softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<Dd> = s.iter().map(|&v| Dd::new(v).sub(Dd::new(max)).exp()).collect();
    let total = e.iter().fold(Dd::ZERO, |acc, x| acc.add(*x));
    e.iter().map(|x| x.div(total).to_f64()).collect()
}

/// Mean of `-log softmax(row)[target]` in double-double.
pub fn dd_cross_entropy(logits: &[f64], vocab: usize, targets: &[usize]) -> f64 {
    let mut total = Dd::ZERO;
    for (row, &t) in logits.chunks(vocab).zip(targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum = row
            .iter()
            .fold(Dd::ZERO, |acc, &v| acc.add(Dd::new(v).sub(Dd::new(max)).exp()));
        let lse = Dd::new(max).add(sum.ln());
        total = total.add(lse.sub(Dd::new(row[t])));
    }
    total.div(Dd::new(targets.len() as f64)).to_f64()
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
}

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Block means over `[b*k, b*(k+1)) x [b*l, b*(l+1))`, summed row by row.
pub fn pool_oracle(values: &[f64], h: usize, w: usize, g: usize) -> Vec<f64> {
    let b = h.min(w) / g;
    let mut out = Vec::with_capacity(g * g);
    for k in 0..g {
        for l in 0..g {
            let mut acc = 0.0;
            for u in b * k..b * (k + 1) {
                for v in b * l..b * (l + 1) {
                    acc += values[u * w + v];
                }
            }
            out.push(acc / (b * b) as f64);
        }
    }
    out
}

/// Indices of the `k` largest values, ties to the smaller index, by a full
/// stable sort.
pub fn topk_oracle(values: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let mut bits = vec![false; values.len()];
    for &i in idx.iter().take(k) {
        bits[i] = true;
    }
    bits
}
