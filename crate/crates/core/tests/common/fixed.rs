//! Fixed-point reals `v · 2^-P` on big integers, accurate to far below f64 resolution.
//!
//! Only what the boundary formulas need: exact import of f64 values, + − × ÷, sqrt and
//! ln (range reduction to [1/√2, √2) followed by the atanh series).

use num_bigint::{BigInt, Sign};
use num_traits::{Signed, ToPrimitive, Zero};

const P: u32 = 192;

// BigInt's `>>` floors, which would leave negative series terms stuck at −1
fn shr_toward_zero(v: BigInt, by: usize) -> BigInt {
    if v.sign() == Sign::Minus {
        -((-v) >> by)
    } else {
        v >> by
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fixed(BigInt);

impl Fixed {
    pub fn from_f64(x: f64) -> Fixed {
        assert!(x.is_finite());
        if x == 0.0 {
            return Fixed(BigInt::zero());
        }
        let bits = x.abs().to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mantissa, e) = if exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), exp - 1075)
        };
        let m = BigInt::from(mantissa);
        let shift = P as i64 + e;
        let v = if shift >= 0 { m << shift as usize } else { m >> (-shift) as usize };
        Fixed(if x < 0.0 { -v } else { v })
    }

    pub fn from_u64(n: u64) -> Fixed {
        Fixed(BigInt::from(n) << P as usize)
    }

    pub fn to_f64(&self) -> f64 {
        let bits = self.0.bits();
        if bits <= 1000 {
            return self.0.to_f64().unwrap() * 2f64.powi(-(P as i32));
        }
        let shift = bits - 900;
        (&self.0 >> shift as usize).to_f64().unwrap() * 2f64.powi(shift as i32 - P as i32)
    }

    pub fn add(&self, o: &Fixed) -> Fixed {
        Fixed(&self.0 + &o.0)
    }

    pub fn sub(&self, o: &Fixed) -> Fixed {
        Fixed(&self.0 - &o.0)
    }

    pub fn mul(&self, o: &Fixed) -> Fixed {
        Fixed(shr_toward_zero(&self.0 * &o.0, P as usize))
    }

    pub fn div(&self, o: &Fixed) -> Fixed {
        assert!(!o.0.is_zero());
        Fixed((&self.0 << P as usize) / &o.0)
    }

    pub fn sqrt(&self) -> Fixed {
        assert!(self.0.sign() != Sign::Minus);
        Fixed((&self.0 << P as usize).sqrt())
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    /// `atanh(t) = Σ t^(2j+1)/(2j+1)` for `|t| ≤ 1/5`-ish.
    fn atanh_small(t: &Fixed) -> Fixed {
        let t2 = t.mul(t);
        let mut power = t.clone();
        let mut acc = Fixed(BigInt::zero());
        let mut j: u64 = 0;
        while !power.0.is_zero() {
            acc = acc.add(&Fixed(&power.0 / BigInt::from(2 * j + 1)));
            power = power.mul(&t2);
            j += 1;
        }
        acc
    }

    pub fn ln2() -> Fixed {
        let third = Fixed::from_u64(1).div(&Fixed::from_u64(3));
        let two = Fixed::from_u64(2);
        two.mul(&Fixed::atanh_small(&third))
    }

    pub fn ln(&self) -> Fixed {
        assert!(self.is_positive(), "ln of non-positive value");
        // self = y · 2^k with y in [1, 2)
        let k = self.0.bits() as i64 - P as i64 - 1;
        let mut y = if k >= 0 {
            Fixed(&self.0 >> k as usize)
        } else {
            Fixed(&self.0 << (-k) as usize)
        };
        let mut k = k;
        // move y into [1/√2, √2) so the series argument stays below 0.18
        let sqrt2 = Fixed::from_u64(2).sqrt();
        if y > sqrt2 {
            y = Fixed(&y.0 >> 1usize);
            k += 1;
        }
        let one = Fixed::from_u64(1);
        let t = y.sub(&one).div(&y.add(&one));
        let ln_y = Fixed::from_u64(2).mul(&Fixed::atanh_small(&t));
        let kk = Fixed(BigInt::from(k) << P as usize);
        kk.mul(&Fixed::ln2()).add(&ln_y)
    }
}

/// `2(nρ²+1)/(n²ρ²) · log((nρ²+1)^{d/2}/α)`.
pub fn region_threshold(n: u64, rho: f64, alpha: f64, d: usize) -> f64 {
    region_threshold_fixed(n, rho, alpha, d).to_f64()
}

fn region_threshold_fixed(n: u64, rho: f64, alpha: f64, d: usize) -> Fixed {
    let n = Fixed::from_u64(n);
    let rho = Fixed::from_f64(rho);
    let rho2 = rho.mul(&rho);
    let x1 = n.mul(&rho2).add(&Fixed::from_u64(1));
    let half_d = Fixed::from_u64(d as u64).div(&Fixed::from_u64(2));
    let log_term = half_d.mul(&x1.ln()).sub(&Fixed::from_f64(alpha).ln());
    Fixed::from_u64(2).mul(&x1).div(&n.mul(&n).mul(&rho2)).mul(&log_term)
}

/// `σ · sqrt(2(nρ²+1)/(n²ρ²) · log(sqrt(nρ²+1)/α))`.
pub fn scalar_radius(n: u64, rho: f64, alpha: f64, sigma: f64) -> f64 {
    Fixed::from_f64(sigma)
        .mul(&region_threshold_fixed(n, rho, alpha, 1).sqrt())
        .to_f64()
}

/// `sqrt((−2 log α + log(−2 log α) + 1) / (σ² · m · log(m ∨ e)))`.
pub fn tune_rho(alpha: f64, m: u64, sigma_sq: f64) -> f64 {
    let minus_two_log_alpha = Fixed::from_u64(0).sub(&Fixed::from_u64(2).mul(&Fixed::from_f64(alpha).ln()));
    let numerator = minus_two_log_alpha
        .add(&minus_two_log_alpha.ln())
        .add(&Fixed::from_u64(1));
    // m ∨ e for integer m: e ≈ 2.718 exceeds 1 and 2 only
    let log_m = if m >= 3 { Fixed::from_u64(m).ln() } else { Fixed::from_u64(1) };
    let denominator = Fixed::from_f64(sigma_sq).mul(&Fixed::from_u64(m)).mul(&log_m);
    numerator.div(&denominator).sqrt().to_f64()
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}
