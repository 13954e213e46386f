//! Landmark shapes, bounding boxes, initialization, and evaluation metrics.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A landmark configuration: L points stored as a flat vector
/// `[r_1, c_1, ..., r_L, c_L]` in pixel units (row before column).
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    coords: DVector<f64>,
}

impl Shape {
    /// Wraps a flat coordinate vector. The length must be even and positive
    /// and every entry finite.
    pub fn from_coords(coords: DVector<f64>) -> Result<Self> {
        if coords.len() == 0 || coords.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "shape vector length must be even and positive (got {})",
                coords.len()
            )));
        }
        if !coords.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("shape coordinates".into()));
        }
        Ok(Shape { coords })
    }

    /// Builds a shape from (row, col) pairs.
    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        let mut coords = DVector::zeros(points.len() * 2);
        for (l, &(r, c)) in points.iter().enumerate() {
            coords[2 * l] = r;
            coords[2 * l + 1] = c;
        }
        Shape::from_coords(coords)
    }

    /// Number of landmarks L.
    pub fn landmarks(&self) -> usize {
        self.coords.len() / 2
    }

    /// (row, col) of landmark `l`.
    pub fn point(&self, l: usize) -> (f64, f64) {
        (self.coords[2 * l], self.coords[2 * l + 1])
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn into_coords(self) -> DVector<f64> {
        self.coords
    }

    /// Tight axis-aligned bounding box of the landmarks. Fails when the
    /// extent is zero in either dimension (all points collinear along an
    /// axis), since such a shape cannot anchor an affine placement.
    pub fn tight_box(&self) -> Result<BoundingBox> {
        let mut min_r = f64::INFINITY;
        let mut max_r = f64::NEG_INFINITY;
        let mut min_c = f64::INFINITY;
        let mut max_c = f64::NEG_INFINITY;
        for l in 0..self.landmarks() {
            let (r, c) = self.point(l);
            min_r = min_r.min(r);
            max_r = max_r.max(r);
            min_c = min_c.min(c);
            max_c = max_c.max(c);
        }
        BoundingBox::new(min_r, min_c, max_r - min_r, max_c - min_c)
    }
}

/// Axis-aligned face box: `top`/`left` corner plus positive extent, pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl BoundingBox {
    pub fn new(top: f64, left: f64, height: f64, width: f64) -> Result<Self> {
        if !(top.is_finite() && left.is_finite() && height.is_finite() && width.is_finite()) {
            return Err(Error::NonFinite("bounding box".into()));
        }
        if height <= 0.0 || width <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bounding box extent must be positive (height {height}, width {width})"
            )));
        }
        Ok(BoundingBox {
            top,
            left,
            height,
            width,
        })
    }

    /// Box with the same center, grown by `fraction` in each dimension
    /// (0.2 = 20% larger).
    pub fn expanded(&self, fraction: f64) -> Result<BoundingBox> {
        let dh = self.height * fraction;
        let dw = self.width * fraction;
        BoundingBox::new(
            self.top - dh / 2.0,
            self.left - dw / 2.0,
            self.height + dh,
            self.width + dw,
        )
    }
}

/// Which landmark indices stand in for the two pupils when normalizing
/// errors. The sets must be non-empty and disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub left_eye_indices: Vec<usize>,
    pub right_eye_indices: Vec<usize>,
}

impl EvalConfig {
    pub fn new(left_eye_indices: Vec<usize>, right_eye_indices: Vec<usize>) -> Result<Self> {
        if left_eye_indices.is_empty() || right_eye_indices.is_empty() {
            return Err(Error::InvalidArgument(
                "eye index sets must be non-empty".into(),
            ));
        }
        if left_eye_indices
            .iter()
            .any(|i| right_eye_indices.contains(i))
        {
            return Err(Error::InvalidArgument(
                "eye index sets must be disjoint".into(),
            ));
        }
        Ok(EvalConfig {
            left_eye_indices,
            right_eye_indices,
        })
    }

    /// 68-landmark annotation scheme: eye centers are the means of the six
    /// contour points of each eye (36-41 left, 42-47 right).
    pub fn ibug68() -> Self {
        EvalConfig {
            left_eye_indices: (36..42).collect(),
            right_eye_indices: (42..48).collect(),
        }
    }

    /// 29-landmark annotation scheme with explicitly annotated pupil points
    /// (indices 16 and 17).
    pub fn lfpw29() -> Self {
        EvalConfig {
            left_eye_indices: vec![16],
            right_eye_indices: vec![17],
        }
    }

    /// Generic fallback for synthetic data: two landmarks half the index
    /// range apart.
    pub fn antipodal(landmarks: usize) -> Result<Self> {
        if landmarks < 2 {
            return Err(Error::InvalidArgument(
                "antipodal normalization needs at least 2 landmarks".into(),
            ));
        }
        EvalConfig::new(vec![0], vec![landmarks / 2])
    }
}

/// Named [`EvalConfig`] presets, so datasets can carry their evaluation
/// convention as data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPreset {
    Ibug68,
    Lfpw29,
    Antipodal,
}

impl EvalPreset {
    pub fn name(self) -> &'static str {
        match self {
            EvalPreset::Ibug68 => "ibug68",
            EvalPreset::Lfpw29 => "lfpw29",
            EvalPreset::Antipodal => "antipodal",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ibug68" => Ok(EvalPreset::Ibug68),
            "lfpw29" => Ok(EvalPreset::Lfpw29),
            "antipodal" => Ok(EvalPreset::Antipodal),
            other => Err(Error::InvalidArgument(format!(
                "unknown eval preset '{other}' (expected ibug68, lfpw29, or antipodal)"
            ))),
        }
    }

    /// Default preset for a landmark count: the two standard annotation
    /// schemes by their exact sizes, antipodal otherwise.
    pub fn for_landmarks(landmarks: usize) -> Self {
        match landmarks {
            68 => EvalPreset::Ibug68,
            29 => EvalPreset::Lfpw29,
            _ => EvalPreset::Antipodal,
        }
    }

    pub fn config(self, landmarks: usize) -> Result<EvalConfig> {
        let cfg = match self {
            EvalPreset::Ibug68 => EvalConfig::ibug68(),
            EvalPreset::Lfpw29 => EvalConfig::lfpw29(),
            EvalPreset::Antipodal => EvalConfig::antipodal(landmarks)?,
        };
        let max = cfg
            .left_eye_indices
            .iter()
            .chain(&cfg.right_eye_indices)
            .max()
            .copied()
            .unwrap_or(0);
        if max >= landmarks {
            return Err(Error::InvalidArgument(format!(
                "eval preset {} needs landmark index {max} but shapes have only {landmarks} landmarks",
                self.name()
            )));
        }
        Ok(cfg)
    }
}

/// Coordinate-wise arithmetic mean of a non-empty list of equal-length
/// shapes.
pub fn mean_shape(shapes: &[Shape]) -> Result<Shape> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of an empty shape list".into()))?;
    let dim = first.coords.len();
    let mut acc = DVector::zeros(dim);
    for s in shapes {
        if s.coords.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "shapes of length {} and {} in the same list",
                dim,
                s.coords.len()
            )));
        }
        acc += &s.coords;
    }
    Shape::from_coords(acc / shapes.len() as f64)
}

/// Maps `reference` by translation plus anisotropic scaling so that its
/// tight bounding box becomes exactly `bbox`. A reference already tight in
/// the box is returned unchanged.
pub fn place_in_bbox(reference: &Shape, bbox: &BoundingBox) -> Result<Shape> {
    let tight = reference.tight_box().map_err(|_| {
        Error::InvalidArgument("reference shape is degenerate (zero extent)".into())
    })?;
    if tight == *bbox {
        return Ok(reference.clone());
    }
    let sr = bbox.height / tight.height;
    let sc = bbox.width / tight.width;
    let mut coords = reference.coords.clone();
    for l in 0..reference.landmarks() {
        coords[2 * l] = bbox.top + (coords[2 * l] - tight.top) * sr;
        coords[2 * l + 1] = bbox.left + (coords[2 * l + 1] - tight.left) * sc;
    }
    Shape::from_coords(coords)
}

/// Mean per-landmark Euclidean error normalized by the truth's inter-pupil
/// distance:
///
/// ```text
/// sum_l ||pred_l - truth_l|| / (L * ||eye_left - eye_right||)
/// ```
///
/// Eye centers are the means of the configured index sets over the *ground
/// truth* shape. Fails if the two centers coincide.
pub fn normalized_mean_error(pred: &Shape, truth: &Shape, cfg: &EvalConfig) -> Result<f64> {
    let landmarks = truth.landmarks();
    if pred.landmarks() != landmarks {
        return Err(Error::DimensionMismatch(format!(
            "prediction has {} landmarks, truth has {}",
            pred.landmarks(),
            landmarks
        )));
    }
    let center = |indices: &[usize]| -> Result<(f64, f64)> {
        let mut r = 0.0;
        let mut c = 0.0;
        for &i in indices {
            if i >= landmarks {
                return Err(Error::InvalidArgument(format!(
                    "eye index {i} out of range for {landmarks} landmarks"
                )));
            }
            let (pr, pc) = truth.point(i);
            r += pr;
            c += pc;
        }
        Ok((r / indices.len() as f64, c / indices.len() as f64))
    };
    let (lr, lc) = center(&cfg.left_eye_indices)?;
    let (rr, rc) = center(&cfg.right_eye_indices)?;
    let interpupil = ((lr - rr).powi(2) + (lc - rc).powi(2)).sqrt();
    if interpupil == 0.0 {
        return Err(Error::DegenerateInterPupil);
    }

    let mut total = 0.0;
    for l in 0..landmarks {
        let (pr, pc) = pred.point(l);
        let (tr, tc) = truth.point(l);
        total += ((pr - tr).powi(2) + (pc - tc).powi(2)).sqrt();
    }
    Ok(total / (landmarks as f64 * interpupil))
}

/// Cumulative error distribution: for each threshold `e`, the fraction of
/// errors that are ≤ e. Thresholds must be sorted ascending; the output
/// fractions are then monotone non-decreasing in [0, 1].
pub fn ced_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument(
            "CED curve of an empty error list".into(),
        ));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(
            "CED thresholds must be sorted ascending".into(),
        ));
    }
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let count = errors.iter().filter(|&&e| e <= t).count();
            (t, count as f64 / n)
        })
        .collect())
}

/// The threshold grid used for reported CED curves: 0.00 to 0.15 in steps
/// of 0.005 (31 values).
pub fn standard_ced_thresholds() -> Vec<f64> {
    (0..=30).map(|i| i as f64 * 0.005).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn shape(points: &[(f64, f64)]) -> Shape {
        Shape::from_points(points).unwrap()
    }

    #[test]
    fn from_coords_validates() {
        assert!(Shape::from_coords(DVector::zeros(0)).is_err());
        assert!(Shape::from_coords(DVector::zeros(3)).is_err());
        assert!(Shape::from_coords(DVector::from_vec(vec![1.0, f64::NAN])).is_err());
        assert!(Shape::from_coords(DVector::from_vec(vec![1.0, 2.0])).is_ok());
    }

    #[test]
    fn mean_of_one_is_identity() {
        let s = shape(&[(1.0, 2.0), (3.0, 4.0)]);
        assert_eq!(mean_shape(&[s.clone()]).unwrap(), s);
    }

    #[test]
    fn mean_of_opposites_is_zero() {
        let s = shape(&[(1.0, 2.0), (3.0, 4.0)]);
        let neg = Shape::from_coords(-s.coords().clone()).unwrap();
        let mean = mean_shape(&[s, neg]).unwrap();
        assert!(mean.coords().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_matches_scalar_loop() {
        let shapes = [
            shape(&[(1.0, 2.0), (3.0, 4.0)]),
            shape(&[(5.0, 1.0), (-2.0, 0.5)]),
            shape(&[(0.25, -3.0), (7.0, 2.5)]),
        ];
        let mean = mean_shape(&shapes).unwrap();
        for i in 0..4 {
            let expected =
                (shapes[0].coords()[i] + shapes[1].coords()[i] + shapes[2].coords()[i]) / 3.0;
            assert_relative_eq!(mean.coords()[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_rejects_empty_and_mismatched() {
        assert!(mean_shape(&[]).is_err());
        let a = shape(&[(1.0, 2.0)]);
        let b = shape(&[(1.0, 2.0), (3.0, 4.0)]);
        assert!(mean_shape(&[a, b]).is_err());
    }

    #[test]
    fn place_identity_when_already_tight() {
        let s = shape(&[(0.0, 0.0), (1.0, 0.5), (2.0, 3.0)]);
        let tight = s.tight_box().unwrap();
        let placed = place_in_bbox(&s, &tight).unwrap();
        assert_eq!(placed, s);
    }

    #[test]
    fn place_unit_square_doubles_into_2x2_box() {
        let s = shape(&[(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]);
        let bbox = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let placed = place_in_bbox(&s, &bbox).unwrap();
        let expected = shape(&[(0.0, 0.0), (0.0, 2.0), (2.0, 0.0), (2.0, 2.0)]);
        assert_eq!(placed, expected);
    }

    #[test]
    fn place_result_is_tight_in_target_box() {
        let s = shape(&[(3.0, -1.0), (7.5, 2.0), (4.0, 9.0), (1.0, 4.0)]);
        let bbox = BoundingBox::new(10.0, 20.0, 55.0, 80.0).unwrap();
        let placed = place_in_bbox(&s, &bbox).unwrap();
        let tight = placed.tight_box().unwrap();
        assert_relative_eq!(tight.top, bbox.top, epsilon = 1e-9);
        assert_relative_eq!(tight.left, bbox.left, epsilon = 1e-9);
        assert_relative_eq!(tight.height, bbox.height, epsilon = 1e-9);
        assert_relative_eq!(tight.width, bbox.width, epsilon = 1e-9);
    }

    #[test]
    fn place_rejects_degenerate_reference() {
        let flat = shape(&[(1.0, 0.0), (1.0, 5.0)]); // zero height extent
        let bbox = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert!(place_in_bbox(&flat, &bbox).is_err());
    }

    #[test]
    fn nme_zero_for_exact_prediction() {
        let truth = shape(&[(0.0, 0.0), (0.0, 10.0), (5.0, 5.0), (9.0, 2.0)]);
        let cfg = EvalConfig::new(vec![0], vec![1]).unwrap();
        assert_eq!(normalized_mean_error(&truth, &truth, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn nme_single_offset_landmark_matches_formula() {
        // One landmark off by d = 3, inter-pupil distance D = 10, L = 4.
        let truth = shape(&[(0.0, 0.0), (0.0, 10.0), (5.0, 5.0), (9.0, 2.0)]);
        let mut pred = truth.clone();
        let mut coords = pred.coords().clone();
        coords[4] += 3.0;
        pred = Shape::from_coords(coords).unwrap();
        let cfg = EvalConfig::new(vec![0], vec![1]).unwrap();
        let nme = normalized_mean_error(&pred, &truth, &cfg).unwrap();
        assert_relative_eq!(nme, 3.0 / (4.0 * 10.0), epsilon = 1e-12);
    }

    #[test]
    fn nme_matches_scalar_oracle_with_index_set_centers() {
        let truth = shape(&[(1.0, 2.0), (3.0, 8.0), (6.0, 1.0), (7.0, 7.0), (2.0, 5.0)]);
        let pred = shape(&[(1.5, 2.5), (2.0, 8.5), (6.5, 0.0), (8.0, 6.0), (2.0, 4.0)]);
        let cfg = EvalConfig::new(vec![0, 1], vec![2, 3]).unwrap();

        // Naive per-landmark loop, written independently of the library path.
        let le = ((1.0 + 3.0) / 2.0, (2.0 + 8.0) / 2.0);
        let re = ((6.0 + 7.0) / 2.0, (1.0 + 7.0) / 2.0);
        let d = ((le.0 - re.0) as f64).hypot(le.1 - re.1);
        let mut total = 0.0;
        for l in 0..5 {
            let (pr, pc) = pred.point(l);
            let (tr, tc) = truth.point(l);
            total += (pr - tr).hypot(pc - tc);
        }
        let oracle = total / (5.0 * d);

        let nme = normalized_mean_error(&pred, &truth, &cfg).unwrap();
        assert_relative_eq!(nme, oracle, epsilon = 1e-12);
    }

    #[test]
    fn nme_rejects_zero_interpupil() {
        let truth = shape(&[(1.0, 1.0), (1.0, 1.0), (4.0, 4.0)]);
        let cfg = EvalConfig::new(vec![0], vec![1]).unwrap();
        match normalized_mean_error(&truth, &truth, &cfg) {
            Err(Error::DegenerateInterPupil) => {}
            other => panic!("expected DegenerateInterPupil, got {other:?}"),
        }
    }

    #[test]
    fn ced_direct_count() {
        let curve = ced_curve(&[1.0, 2.0, 3.0], &[2.0]).unwrap();
        assert_eq!(curve, vec![(2.0, 2.0 / 3.0)]);
    }

    #[test]
    fn ced_boundaries() {
        let curve = ced_curve(&[1.0, 2.0, 3.0], &[0.5, 3.5]).unwrap();
        assert_eq!(curve[0].1, 0.0);
        assert_eq!(curve[1].1, 1.0);
    }

    #[test]
    fn ced_rejects_empty_and_unsorted() {
        assert!(ced_curve(&[], &[1.0]).is_err());
        assert!(ced_curve(&[1.0], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn standard_thresholds_grid() {
        let t = standard_ced_thresholds();
        assert_eq!(t.len(), 31);
        assert_eq!(t[0], 0.0);
        assert_relative_eq!(t[30], 0.15, epsilon = 1e-12);
        assert_relative_eq!(t[1], 0.005, epsilon = 1e-12);
    }

    #[test]
    fn eval_presets() {
        let ibug = EvalConfig::ibug68();
        assert_eq!(ibug.left_eye_indices, vec![36, 37, 38, 39, 40, 41]);
        assert_eq!(ibug.right_eye_indices, vec![42, 43, 44, 45, 46, 47]);
        let lfpw = EvalConfig::lfpw29();
        assert_eq!((lfpw.left_eye_indices[0], lfpw.right_eye_indices[0]), (16, 17));
        let anti = EvalConfig::antipodal(10).unwrap();
        assert_eq!((anti.left_eye_indices[0], anti.right_eye_indices[0]), (0, 5));
        assert!(EvalPreset::Ibug68.config(68).is_ok());
        assert!(EvalPreset::Ibug68.config(29).is_err());
        assert_eq!(EvalPreset::for_landmarks(29), EvalPreset::Lfpw29);
        assert_eq!(EvalPreset::from_name("antipodal").unwrap(), EvalPreset::Antipodal);
        assert!(EvalPreset::from_name("bogus").is_err());
    }

    fn arb_shape(l: usize) -> impl Strategy<Value = Shape> {
        proptest::collection::vec((-100.0..100.0f64, -100.0..100.0f64), l)
            .prop_map(|pts| Shape::from_points(&pts).unwrap())
    }

    proptest! {
        #[test]
        fn nme_translation_invariant(
            pred in arb_shape(6),
            truth in arb_shape(6),
            dr in -50.0..50.0f64,
            dc in -50.0..50.0f64,
        ) {
            let cfg = EvalConfig::new(vec![0, 1], vec![3]).unwrap();
            let translate = |s: &Shape| {
                let mut c = s.coords().clone();
                for l in 0..s.landmarks() {
                    c[2 * l] += dr;
                    c[2 * l + 1] += dc;
                }
                Shape::from_coords(c).unwrap()
            };
            if let Ok(base) = normalized_mean_error(&pred, &truth, &cfg) {
                let moved =
                    normalized_mean_error(&translate(&pred), &translate(&truth), &cfg).unwrap();
                prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base));
            }
        }

        #[test]
        fn nme_scale_invariant(
            pred in arb_shape(6),
            truth in arb_shape(6),
            scale in 0.1..10.0f64,
        ) {
            let cfg = EvalConfig::new(vec![0], vec![2]).unwrap();
            let scaled = |s: &Shape| Shape::from_coords(s.coords() * scale).unwrap();
            if let Ok(base) = normalized_mean_error(&pred, &truth, &cfg) {
                let s = normalized_mean_error(&scaled(&pred), &scaled(&truth), &cfg).unwrap();
                prop_assert!((base - s).abs() <= 1e-9 * (1.0 + base));
            }
        }

        #[test]
        fn ced_matches_counting_oracle_and_is_monotone(
            errors in proptest::collection::vec(0.0..1.0f64, 1..40),
            mut thresholds in proptest::collection::vec(0.0..1.0f64, 1..20),
        ) {
            thresholds.sort_by(f64::total_cmp);
            let curve = ced_curve(&errors, &thresholds).unwrap();
            let mut prev = 0.0;
            for &(t, frac) in &curve {
                let count = errors.iter().filter(|&&e| e <= t).count();
                prop_assert!((frac - count as f64 / errors.len() as f64).abs() < 1e-15);
                prop_assert!((0.0..=1.0).contains(&frac));
                prop_assert!(frac >= prev);
                prev = frac;
            }
        }

        #[test]
        fn place_in_bbox_is_idempotent(
            s in arb_shape(5),
            top in -20.0..20.0f64,
            left in -20.0..20.0f64,
            height in 1.0..100.0f64,
            width in 1.0..100.0f64,
        ) {
            let bbox = BoundingBox::new(top, left, height, width).unwrap();
            if let Ok(once) = place_in_bbox(&s, &bbox) {
                let twice = place_in_bbox(&once, &bbox).unwrap();
                for i in 0..once.coords().len() {
                    prop_assert!((once.coords()[i] - twice.coords()[i]).abs() < 1e-9);
                }
            }
        }
    }
}
