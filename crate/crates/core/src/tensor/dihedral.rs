use super::{Scalar, Shape, Tensor};

/// One of the eight flip/transpose symmetries of a rectangle.
///
/// The transform first optionally transposes the spatial axes, then
/// optionally flips rows (vertical) and columns (horizontal).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    const FLIP_H: u8 = 1;
    const FLIP_V: u8 = 2;
    const TRANSPOSE: u8 = 4;

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral(i as u8))
    }

    pub fn from_index(i: usize) -> Option<Dihedral> {
        (i < 8).then_some(Dihedral(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn new(transpose: bool, flip_v: bool, flip_h: bool) -> Self {
        Dihedral(
            ((transpose as u8) * Self::TRANSPOSE)
                | ((flip_v as u8) * Self::FLIP_V)
                | ((flip_h as u8) * Self::FLIP_H),
        )
    }

    pub fn transposes(self) -> bool {
        self.0 & Self::TRANSPOSE != 0
    }

    fn flips_v(self) -> bool {
        self.0 & Self::FLIP_V != 0
    }

    fn flips_h(self) -> bool {
        self.0 & Self::FLIP_H != 0
    }

    /// Signed permutation matrix acting on centered `(y, x)` coordinates.
    pub fn matrix(self) -> [[i8; 2]; 2] {
        let t = if self.transposes() {
            [[0, 1], [1, 0]]
        } else {
            [[1, 0], [0, 1]]
        };
        let fy = if self.flips_v() { -1 } else { 1 };
        let fx = if self.flips_h() { -1 } else { 1 };
        [[fy * t[0][0], fy * t[0][1]], [fx * t[1][0], fx * t[1][1]]]
    }

    fn from_matrix(m: [[i8; 2]; 2]) -> Dihedral {
        Self::all()
            .into_iter()
            .find(|d| d.matrix() == m)
            .expect("signed permutation matrices form the dihedral group")
    }

    /// `self.then(other)` applies `self` first, then `other`.
    pub fn then(self, other: Dihedral) -> Dihedral {
        let (a, b) = (other.matrix(), self.matrix());
        let mut m = [[0i8; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Self::from_matrix(m)
    }

    pub fn inverse(self) -> Dihedral {
        let m = self.matrix();
        Self::from_matrix([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.transposes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Apply to every plane of `input`.
    pub fn apply<T: Scalar>(self, input: &Tensor<T>) -> Tensor<T> {
        if self == Self::IDENTITY {
            return input.clone();
        }
        let s = input.shape();
        let (ho, wo) = self.output_dims(s.h, s.w);
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = input.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..ho {
                    let y1 = if self.flips_v() { ho - 1 - y } else { y };
                    for x in 0..wo {
                        let x1 = if self.flips_h() { wo - 1 - x } else { x };
                        let (sy, sx) = if self.transposes() {
                            (x1, y1)
                        } else {
                            (y1, x1)
                        };
                        dst[y * wo + x] = src[sy * s.w + sx];
                    }
                }
            }
        }
        out
    }
}
