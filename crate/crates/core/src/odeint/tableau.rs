use crate::densela::DenseMatrix;

/// Coefficients `(A, b, c)` of a Runge–Kutta scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub name: &'static str,
    pub a: DenseMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub order: u32,
}

impl ButcherTableau {
    fn from_parts(name: &'static str, a: &[&[f64]], b: &[f64], c: &[f64], order: u32) -> Self {
        let rows: Vec<Vec<f64>> = a.iter().map(|r| r.to_vec()).collect();
        let t = ButcherTableau {
            name,
            a: DenseMatrix::from_rows(&rows),
            b: b.to_vec(),
            c: c.to_vec(),
            order,
        };
        t.assert_consistent();
        t
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// `Σ b = 1` and row sums of `A` equal `c`.
    pub fn assert_consistent(&self) {
        let s = self.stages();
        assert_eq!(self.a.shape(), (s, s), "{}: A must be {s}x{s}", self.name);
        assert_eq!(self.c.len(), s, "{}: c has wrong length", self.name);
        let bsum: f64 = self.b.iter().sum();
        assert!((bsum - 1.0).abs() < 1e-15, "{}: weights sum to {bsum}", self.name);
        for i in 0..s {
            let row: f64 = self.a.row(i).iter().sum();
            assert!(
                (row - self.c[i]).abs() < 1e-15,
                "{}: row {i} sums to {row}, node is {}",
                self.name,
                self.c[i]
            );
        }
    }

    pub fn backward_euler() -> Self {
        Self::from_parts("backward-euler", &[&[1.0]], &[1.0], &[1.0], 1)
    }

    /// Trapezoid rule as a two-stage scheme whose first stage is `y_n`.
    pub fn trapezoid() -> Self {
        Self::from_parts("trapezoid", &[&[0.0, 0.0], &[0.5, 0.5]], &[0.5, 0.5], &[0.0, 1.0], 2)
    }

    /// Radau IIA, two stages, order 3.
    pub fn radau3() -> Self {
        Self::from_parts(
            "radau3",
            &[&[0.416_666_666_666_666_7, -0.083_333_333_333_333_33], &[0.75, 0.25]],
            &[0.75, 0.25],
            &[0.333_333_333_333_333_3, 1.0],
            3,
        )
    }

    /// Radau IIA, three stages, order 5.
    pub fn radau5() -> Self {
        let a = [
            [
                0.196_815_477_223_660_43,
                -0.065_535_425_850_198_39,
                0.023_770_974_348_220_152,
            ],
            [
                0.394_424_314_739_087_28,
                0.292_073_411_665_228_46,
                -0.041_548_752_125_997_93,
            ],
            [
                0.376_403_062_700_467_28,
                0.512_485_826_188_421_6,
                0.111_111_111_111_111_11,
            ],
        ];
        // Nodes are the row sums of the literals above (equal to
        // (4 ∓ √6)/10 and 1 to the last digit).
        let c = [
            a[0][0] + a[0][1] + a[0][2],
            a[1][0] + a[1][1] + a[1][2],
            a[2][0] + a[2][1] + a[2][2],
        ];
        Self::from_parts("radau5", &[&a[0], &a[1], &a[2]], &a[2], &c, 5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radau5_matches_closed_form_entries() {
        let s6 = 6f64.sqrt();
        let t = ButcherTableau::radau5();
        let exact = [
            [
                (88.0 - 7.0 * s6) / 360.0,
                (296.0 - 169.0 * s6) / 1800.0,
                (-2.0 + 3.0 * s6) / 225.0,
            ],
            [
                (296.0 + 169.0 * s6) / 1800.0,
                (88.0 + 7.0 * s6) / 360.0,
                (-2.0 - 3.0 * s6) / 225.0,
            ],
            [(16.0 - s6) / 36.0, (16.0 + s6) / 36.0, 1.0 / 9.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((t.a[(i, j)] - exact[i][j]).abs() < 2e-16, "({i},{j})");
            }
        }
        assert!((t.c[0] - (4.0 - s6) / 10.0).abs() < 1e-15);
        assert!((t.c[1] - (4.0 + s6) / 10.0).abs() < 1e-15);
        assert!((t.c[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn radau3_matches_closed_form_entries() {
        let t = ButcherTableau::radau3();
        assert!((t.a[(0, 0)] - 5.0 / 12.0).abs() < 1e-17);
        assert!((t.a[(0, 1)] + 1.0 / 12.0).abs() < 1e-17);
        assert!((t.c[0] - 1.0 / 3.0).abs() < 1e-17);
    }

    #[test]
    fn all_tableaus_consistent() {
        for t in [
            ButcherTableau::backward_euler(),
            ButcherTableau::trapezoid(),
            ButcherTableau::radau3(),
            ButcherTableau::radau5(),
        ] {
            t.assert_consistent();
        }
    }

    #[test]
    fn radau_simplifying_conditions() {
        // B(p): Σ b_j c_j^{k-1} = 1/k for k up to the order.
        for t in [ButcherTableau::radau3(), ButcherTableau::radau5()] {
            for k in 1..=t.order {
                let s: f64 = t.b.iter().zip(&t.c).map(|(b, c)| b * c.powi(k as i32 - 1)).sum();
                assert!((s - 1.0 / k as f64).abs() < 1e-14, "{} B({k})", t.name);
            }
        }
    }
}
