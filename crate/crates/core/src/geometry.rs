//! Patient-space geometry following the DICOM pixel-to-patient convention,
//! and the nearest-axial-slice matching used to pair sagittal levels with
//! axial cross-sections.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::level::NUM_LEVELS;
use crate::math;

/// Tolerance for unit-norm and orthogonality checks on direction cosines.
pub const ORIENTATION_TOLERANCE: f64 = 1e-6;

/// Default number of axial slices matched per level.
pub const DEFAULT_SLICES_PER_LEVEL: usize = 3;

/// A sub-pixel location in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Point2D {
    pub row: f64,
    pub col: f64,
}

impl Point2D {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        let dr = self.row - other.row;
        let dc = self.col - other.col;
        math::sqrt(dr * dr + dc * dc)
    }
}

/// A location in patient space, millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3D {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

/// Everything needed to map a pixel of one slice into patient space.
///
/// `row_dir` is the direction of increasing column index and `col_dir` the
/// direction of increasing row index, matching the two triplets of
/// ImageOrientationPatient. `origin` is ImagePositionPatient, the centre of
/// pixel (0, 0).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SliceGeometry {
    pub row_dir: [f64; 3],
    pub col_dir: [f64; 3],
    pub origin: [f64; 3],
    /// Millimetres between adjacent rows.
    pub spacing_row: f64,
    /// Millimetres between adjacent columns.
    pub spacing_col: f64,
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl SliceGeometry {
    /// Axis-aligned geometry with the given in-plane directions.
    pub fn new(
        row_dir: [f64; 3],
        col_dir: [f64; 3],
        origin: [f64; 3],
        spacing_row: f64,
        spacing_col: f64,
    ) -> Result<Self> {
        let g = Self { row_dir, col_dir, origin, spacing_row, spacing_col };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .row_dir
            .iter()
            .chain(&self.col_dir)
            .chain(&self.origin)
            .chain([&self.spacing_row, &self.spacing_col])
            .all(|v| v.is_finite());
        if !finite {
            return Err(CoreError::BadGeometry("non-finite component".into()));
        }
        let rn = math::sqrt(dot(&self.row_dir, &self.row_dir));
        let cn = math::sqrt(dot(&self.col_dir, &self.col_dir));
        if (rn - 1.0).abs() > ORIENTATION_TOLERANCE || (cn - 1.0).abs() > ORIENTATION_TOLERANCE {
            return Err(CoreError::BadGeometry(format!(
                "direction cosines must be unit length (|row_dir|={rn}, |col_dir|={cn})"
            )));
        }
        let d = dot(&self.row_dir, &self.col_dir);
        if d.abs() > ORIENTATION_TOLERANCE {
            return Err(CoreError::BadGeometry(format!(
                "direction cosines must be orthogonal (dot={d})"
            )));
        }
        if self.spacing_row <= 0.0 || self.spacing_col <= 0.0 {
            return Err(CoreError::BadGeometry("pixel spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Maps a pixel location to patient space:
/// `origin + row * spacing_row * col_dir + col * spacing_col * row_dir`.
pub fn project_to_3d(geom: &SliceGeometry, p: Point2D) -> Point3D {
    let dr = p.row * geom.spacing_row;
    let dc = p.col * geom.spacing_col;
    let axis = |i: usize| geom.origin[i] + dr * geom.col_dir[i] + dc * geom.row_dir[i];
    Point3D::new(axis(0), axis(1), axis(2))
}

/// Patient z of the slice centre, i.e. of pixel `(rows / 2, cols / 2)`.
pub fn slice_plane_z(geom: &SliceGeometry, rows: usize, cols: usize) -> f64 {
    project_to_3d(geom, Point2D::new(rows as f64 / 2.0, cols as f64 / 2.0)).z
}

/// An axial slice's geometry together with its pixel dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxialPlane {
    pub geometry: SliceGeometry,
    pub rows: usize,
    pub cols: usize,
}

impl AxialPlane {
    pub fn center_z(&self) -> f64 {
        slice_plane_z(&self.geometry, self.rows, self.cols)
    }
}

/// Indices of the `k` axial slices whose centre z is closest to `level_z`.
///
/// Equal distances go to the lower slice index. The result is ordered by
/// ascending centre z (then index).
pub fn nearest_axial_slices(level_z: f64, axial: &[AxialPlane], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(CoreError::InvalidParameter("k must be at least 1".into()));
    }
    if axial.len() < k {
        return Err(CoreError::NotEnoughSlices { needed: k, available: axial.len() });
    }
    let z: Vec<f64> = axial.iter().map(AxialPlane::center_z).collect();
    let mut order: Vec<usize> = (0..axial.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (z[a] - level_z).abs();
        let db = (z[b] - level_z).abs();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    Ok(order)
}

/// A level keypoint on the sagittal slice chosen for that level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelPoint {
    pub geometry: SliceGeometry,
    pub point: Point2D,
}

/// Projects each level keypoint to patient space and picks its `k` nearest
/// axial slices by z. Returns one row of `k` axial indices per level.
pub fn match_levels(
    levels: &[LevelPoint; NUM_LEVELS],
    axial: &[AxialPlane],
    k: usize,
) -> Result<[Vec<usize>; NUM_LEVELS]> {
    let mut out: [Vec<usize>; NUM_LEVELS] = Default::default();
    for (row, lp) in out.iter_mut().zip(levels) {
        let z = project_to_3d(&lp.geometry, lp.point).z;
        *row = nearest_axial_slices(z, axial, k)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn identity() -> SliceGeometry {
        SliceGeometry::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0; 3], 1.0, 1.0).unwrap()
    }

    fn axial_at(zs: &[f64]) -> Vec<AxialPlane> {
        zs.iter()
            .map(|&z| AxialPlane {
                geometry: SliceGeometry::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, z], 0.5, 0.5)
                    .unwrap(),
                rows: 64,
                cols: 64,
            })
            .collect()
    }

    #[test]
    fn identity_projection_swaps_row_and_col() {
        let p = project_to_3d(&identity(), Point2D::new(10.0, 20.0));
        assert_eq!(p, Point3D::new(20.0, 10.0, 0.0));
    }

    #[test]
    fn origin_passes_through() {
        let mut g = identity();
        g.origin = [5.0, -3.0, 7.0];
        assert_eq!(project_to_3d(&g, Point2D::new(0.0, 0.0)), Point3D::new(5.0, -3.0, 7.0));
    }

    #[test]
    fn flat_axial_plane_z_is_origin_z() {
        let mut g = identity();
        g.origin = [3.0, 4.0, 12.5];
        assert_eq!(slice_plane_z(&g, 64, 48), 12.5);
        g.origin = [0.0, 0.0, -4.0];
        assert_eq!(slice_plane_z(&g, 7, 9), -4.0);
    }

    #[test]
    fn tilted_plane_z_matches_center_projection() {
        let s = 0.5f64.sqrt();
        let g = SliceGeometry::new([1.0, 0.0, 0.0], [0.0, s, -s], [1.0, 2.0, 30.0], 0.8, 0.7).unwrap();
        let center = project_to_3d(&g, Point2D::new(32.0, 20.0));
        assert_eq!(slice_plane_z(&g, 64, 40), center.z);
        assert!((center.z - (30.0 - 32.0 * 0.8 * s)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_unit_and_non_orthogonal_cosines() {
        assert!(matches!(
            SliceGeometry::new([1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0; 3], 1.0, 1.0),
            Err(CoreError::BadGeometry(_))
        ));
        assert!(matches!(
            SliceGeometry::new([1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0; 3], 1.0, 1.0),
            Err(CoreError::BadGeometry(_))
        ));
        assert!(matches!(
            SliceGeometry::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0; 3], 0.0, 1.0),
            Err(CoreError::BadGeometry(_))
        ));
    }

    #[test]
    fn nearest_breaks_ties_by_lower_index() {
        // distances (5, 3, 1, 1, 3): z=4 and z=6, then z=2 beats z=8
        let axial = axial_at(&[0.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(nearest_axial_slices(5.0, &axial, 3).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn nearest_result_is_sorted_by_z() {
        let axial = axial_at(&[8.0, 6.0, 4.0, 2.0, 0.0]);
        // ties: z=2 (index 3) and z=8 (index 0) -> index 0 wins
        assert_eq!(nearest_axial_slices(5.0, &axial, 3).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn forced_and_insufficient_selection() {
        let axial = axial_at(&[3.0, 1.0, 2.0]);
        assert_eq!(nearest_axial_slices(100.0, &axial, 3).unwrap(), vec![1, 2, 0]);
        assert_eq!(
            nearest_axial_slices(0.0, &axial[..2], 3),
            Err(CoreError::NotEnoughSlices { needed: 3, available: 2 })
        );
    }

    #[test]
    fn match_levels_yields_fifteen_selections() {
        // sagittal: rows run down in z, columns run posterior
        let sag = SliceGeometry::new([0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [0.0, 0.0, 50.0], 1.0, 1.0)
            .unwrap();
        let axial = axial_at(&(0..40).map(|i| i as f64 * 1.5).collect::<Vec<_>>());
        let levels = core::array::from_fn(|j| LevelPoint {
            geometry: sag,
            point: Point2D::new(8.0 + 8.0 * j as f64, 20.0),
        });
        let table = match_levels(&levels, &axial, 3).unwrap();
        assert_eq!(table.iter().map(Vec::len).sum::<usize>(), 15);
        // level 0 at z = 42 -> slice 28 exactly, neighbours 27 and 29
        assert_eq!(table[0], vec![27, 28, 29]);

        let three = axial_at(&[10.0, 20.0, 30.0]);
        for row in match_levels(&levels, &three, 3).unwrap() {
            assert_eq!(row, vec![0, 1, 2]);
        }
    }
}
