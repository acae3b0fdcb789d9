//! Discretized yaw rotation group `C_N` (rotations about the gravity axis).
//!
//! Element `k` of a group of order `N` is the rotation by `2πk/N`. Composition
//! is modular addition of indices, which is what makes orbit features shift
//! circularly under input rotation.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{EonError, Result};

pub type Mat3 = [[f64; 3]; 3];

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = x - two_pi * ((x + PI) / two_pi).floor();
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w += two_pi;
    }
    w
}

/// Yaw rotation matrix about +z.
pub fn yaw_matrix(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CyclicGroup {
    order: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement {
    index: usize,
    order: usize,
}

impl CyclicGroup {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(EonError::InvalidArgument(
                "group order must be at least 1".into(),
            ));
        }
        Ok(Self { order })
    }

    /// Signed constructor matching the command-line/config surface.
    pub fn from_signed(order: i64) -> Result<Self> {
        if order <= 0 {
            return Err(EonError::InvalidArgument(format!(
                "group order must be positive, got {order}"
            )));
        }
        Self::new(order as usize)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement {
            index: 0,
            order: self.order,
        }
    }

    pub fn element(&self, index: usize) -> Result<GroupElement> {
        if index >= self.order {
            return Err(EonError::InvalidArgument(format!(
                "element index {index} out of range for group of order {}",
                self.order
            )));
        }
        Ok(GroupElement {
            index,
            order: self.order,
        })
    }

    /// Element with index taken modulo the order.
    pub fn element_mod(&self, index: i64) -> GroupElement {
        GroupElement {
            index: index.rem_euclid(self.order as i64) as usize,
            order: self.order,
        }
    }

    pub fn elements(&self) -> impl Iterator<Item = GroupElement> + '_ {
        (0..self.order).map(move |index| GroupElement {
            index,
            order: self.order,
        })
    }

    pub fn step(&self) -> f64 {
        2.0 * PI / self.order as f64
    }

    pub fn angles(&self) -> Vec<f64> {
        self.elements().map(|g| g.angle()).collect()
    }

    /// Nearest bin under wrapped angular distance; exact half-bin ties go to
    /// the smaller index.
    pub fn angle_to_bin(&self, yaw: f64) -> Result<GroupElement> {
        if !yaw.is_finite() {
            return Err(EonError::InvalidArgument(format!(
                "yaw must be finite, got {yaw}"
            )));
        }
        let n = self.order as i64;
        let t = wrap_angle(yaw) / self.step();
        let lower = t.floor();
        let frac = t - lower;
        let lo = (lower as i64).rem_euclid(n);
        let hi = (lower as i64 + 1).rem_euclid(n);
        let index = if frac < 0.5 {
            lo
        } else if frac > 0.5 {
            hi
        } else {
            lo.min(hi)
        };
        Ok(self.element_mod(index))
    }
}

impl GroupElement {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn group(&self) -> CyclicGroup {
        CyclicGroup { order: self.order }
    }

    pub fn is_identity(&self) -> bool {
        self.index == 0
    }

    pub fn angle(&self) -> f64 {
        2.0 * PI * self.index as f64 / self.order as f64
    }

    /// `(cos, sin)` of the element angle. Quarter-turn multiples are returned
    /// exactly so that `C_4` rotations are pure coordinate swaps and sign flips.
    pub fn cos_sin(&self) -> (f64, f64) {
        let (k, n) = (self.index, self.order);
        if (4 * k) % n == 0 {
            match (4 * k / n) % 4 {
                0 => (1.0, 0.0),
                1 => (0.0, 1.0),
                2 => (-1.0, 0.0),
                _ => (0.0, -1.0),
            }
        } else {
            let (s, c) = self.angle().sin_cos();
            (c, s)
        }
    }

    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement> {
        self.check_same(other)?;
        Ok(GroupElement {
            index: (self.index + other.index) % self.order,
            order: self.order,
        })
    }

    pub fn inverse(&self) -> GroupElement {
        GroupElement {
            index: (self.order - self.index) % self.order,
            order: self.order,
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        let (c, s) = self.cos_sin();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    /// Index an orbit entry at slot `self` moves to when the input is rotated
    /// by `k0`: `k' = k0 ∘ k`.
    pub fn orbit_index_after_rotation(&self, k0: &GroupElement) -> Result<GroupElement> {
        k0.compose(self)
    }

    fn check_same(&self, other: &GroupElement) -> Result<()> {
        if self.order != other.order {
            return Err(EonError::InvalidArgument(format!(
                "elements from groups of order {} and {}",
                self.order, other.order
            )));
        }
        Ok(())
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.index, self.order)
    }
}

/// Circularly shifts an orbit array so that entry `k` moves to `k0 ∘ k`.
pub fn shift_orbit<V: Clone>(orbit: &[V], k0: &GroupElement) -> Result<Vec<V>> {
    let n = orbit.len();
    if n != k0.order() {
        return Err(EonError::InvalidArgument(format!(
            "orbit of length {n} shifted by element of group order {}",
            k0.order()
        )));
    }
    let mut out = orbit.to_vec();
    for (k, v) in orbit.iter().enumerate() {
        out[(k0.index() + k) % n] = v.clone();
    }
    Ok(out)
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(n: usize) -> CyclicGroup {
        CyclicGroup::new(n).unwrap()
    }

    #[test]
    fn make_group_angles() {
        let c4 = g(4);
        let angles = c4.angles();
        let expected = [0.0, PI / 2.0, PI, 3.0 * PI / 2.0];
        for (a, e) in angles.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(g(1).angles(), vec![0.0]);
        for (k, a) in g(8).angles().iter().enumerate() {
            assert!((a - k as f64 * PI / 4.0).abs() < 1e-15);
        }
        assert!(CyclicGroup::new(0).is_err());
        assert!(CyclicGroup::from_signed(-3).is_err());
    }

    #[test]
    fn compose_and_inverse() {
        let c4 = g(4);
        let e = |k| c4.element(k).unwrap();
        assert_eq!(e(1).compose(&e(2)).unwrap(), e(3));
        assert_eq!(e(3).compose(&e(2)).unwrap(), e(1));
        for k in 0..4 {
            assert_eq!(c4.identity().compose(&e(k)).unwrap(), e(k));
        }
        assert_eq!(e(3).inverse(), e(1));
        assert_eq!(c4.identity().inverse(), c4.identity());
        let c2 = g(2);
        assert_eq!(c2.element(1).unwrap().inverse(), c2.element(1).unwrap());
        assert!(e(1).compose(&c2.element(1).unwrap()).is_err());
    }

    #[test]
    fn rotation_matrix_examples() {
        let c4 = g(4);
        assert_eq!(
            c4.identity().rotation_matrix(),
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        );
        assert_eq!(
            c4.element(1).unwrap().rotation_matrix(),
            [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
        );
        assert_eq!(
            c4.element(2).unwrap().rotation_matrix(),
            [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]
        );
    }

    /// Brute-force nearest bin by wrapped distance, ties to smaller index.
    fn nearest_bin_oracle(yaw: f64, n: usize) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..n {
            let d = wrap_angle(yaw - 2.0 * PI * k as f64 / n as f64).abs();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    #[test]
    fn angle_to_bin_examples() {
        let c4 = g(4);
        assert_eq!(c4.angle_to_bin(0.0).unwrap().index(), 0);
        assert_eq!(nearest_bin_oracle(0.8, 4), 1);
        assert_eq!(c4.angle_to_bin(0.8).unwrap().index(), 1);
        // Exact tie between bins 0 and 3.
        let d0 = wrap_angle(-PI / 4.0).abs();
        let d3 = wrap_angle(-PI / 4.0 - 3.0 * PI / 2.0).abs();
        assert!((d0 - d3).abs() < 1e-15);
        assert_eq!(c4.angle_to_bin(-PI / 4.0).unwrap().index(), 0);
        assert!(c4.angle_to_bin(f64::NAN).is_err());
        assert!(c4.angle_to_bin(f64::INFINITY).is_err());
    }

    #[test]
    fn angle_to_bin_matches_oracle_off_ties() {
        for n in 1..=16 {
            let grp = g(n);
            for i in 0..2000 {
                let yaw = -7.0 + 14.0 * (i as f64 + 0.37) / 2000.0;
                assert_eq!(
                    grp.angle_to_bin(yaw).unwrap().index(),
                    nearest_bin_oracle(yaw, n),
                    "n={n} yaw={yaw}"
                );
            }
        }
    }

    #[test]
    fn angle_to_bin_exact_on_group_angles() {
        for n in 1..=16 {
            let grp = g(n);
            for el in grp.elements() {
                assert_eq!(grp.angle_to_bin(el.angle()).unwrap(), el);
            }
        }
    }

    #[test]
    fn orbit_shift_examples() {
        let c4 = g(4);
        let orbit = ['a', 'b', 'c', 'd'];
        let k1 = c4.element(1).unwrap();
        assert_eq!(shift_orbit(&orbit, &k1).unwrap(), vec!['d', 'a', 'b', 'c']);
        assert_eq!(shift_orbit(&orbit, &c4.identity()).unwrap(), orbit.to_vec());
        let k2 = c4.element(2).unwrap();
        let twice = shift_orbit(&shift_orbit(&orbit, &k2).unwrap(), &k2).unwrap();
        assert_eq!(twice, orbit.to_vec());
        assert_eq!(
            c4.element(3)
                .unwrap()
                .orbit_index_after_rotation(&k1)
                .unwrap(),
            c4.identity()
        );
    }

    #[test]
    fn wrap_angle_range() {
        for x in [-10.0, -PI, PI, 0.0, 3.5, 2.0 * PI, -2.0 * PI + 1e-17] {
            let w = wrap_angle(x);
            assert!((-PI..PI).contains(&w), "{x} -> {w}");
        }
        assert_eq!(wrap_angle(PI), -PI);
    }
}
