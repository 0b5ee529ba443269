//! Synthetic volumetric datasets: spheres and tubes on a noisy background.
//!
//! Tubes exist to give the 2D plane learners axis-dependent difficulty: a
//! tube along z is a disc in every xy slice but a long band in xz/yz, so
//! different viewing planes genuinely disagree.
//!
//! Everything is a pure function of (spec, item index): each item draws from
//! its own derived RNG stream, so parallel and serial generation produce the
//! same bytes.

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::volume::{voxel_count, Dims, LabelVolume, Spacing, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
    #[error("split assigns no labeled items")]
    EmptyLabeledSplit,
    #[error("split fractions sum to {0}, expected 1")]
    BadFractions(f64),
}

/// Count and radius ranges for one shape kind; both ranges are inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeRange {
    pub count: (usize, usize),
    pub radius: (f64, f64),
}

/// Generation recipe. `intensity_means[c]` is the mean image intensity of
/// class c; voxels get additive Gaussian noise with `noise_sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub num_classes: usize,
    pub spheres: ShapeRange,
    pub tubes: ShapeRange,
    /// Permit tubes along body diagonals in addition to the three axes.
    pub diagonal_tubes: bool,
    pub noise_sigma: f64,
    pub intensity_means: Vec<f64>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (nx, ny, nz) = self.dims;
        let err = |m: String| Err(SynthError::InfeasibleSpec(m));
        if nx < 3 || ny < 3 || nz < 3 {
            return err(format!("dims {:?} too small", self.dims));
        }
        if !(self.num_classes == 2 || self.num_classes == 3) {
            return err(format!("num_classes {} not in {{2,3}}", self.num_classes));
        }
        if self.intensity_means.len() != self.num_classes {
            return err(format!(
                "{} intensity means for {} classes",
                self.intensity_means.len(),
                self.num_classes
            ));
        }
        if self.intensity_means.iter().any(|m| !m.is_finite()) {
            return err("non-finite intensity mean".into());
        }
        for i in 0..self.intensity_means.len() {
            for j in i + 1..self.intensity_means.len() {
                if self.intensity_means[i] == self.intensity_means[j] {
                    return err(format!("intensity means {i} and {j} coincide"));
                }
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return err(format!("noise_sigma {}", self.noise_sigma));
        }
        let min_dim = nx.min(ny).min(nz) as f64;
        for (name, s) in [("spheres", self.spheres), ("tubes", self.tubes)] {
            if s.count.0 > s.count.1 {
                return err(format!("{name} count range {:?} inverted", s.count));
            }
            if !(s.radius.0 > 0.0 && s.radius.0 <= s.radius.1 && s.radius.1.is_finite()) {
                return err(format!("{name} radius range {:?} invalid", s.radius));
            }
            if s.count.1 > 0 && 2.0 * s.radius.1 + 1.0 > min_dim {
                return err(format!(
                    "{name} max radius {} does not fit in dims {:?}",
                    s.radius.1, self.dims
                ));
            }
        }
        // every class must be paintable: class 1 comes from spheres, class 2
        // (when present) from tubes; with two classes either shape kind serves
        let feasible = if self.num_classes == 3 {
            self.spheres.count.0 >= 1 && self.tubes.count.0 >= 1
        } else {
            self.spheres.count.0 + self.tubes.count.0 >= 1
        };
        if !feasible {
            return err("shape count minima cannot cover every foreground class".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    TrainLabeled,
    TrainUnlabeled,
    Test,
}

impl SplitTag {
    pub fn tag(&self) -> &'static str {
        match self {
            SplitTag::TrainLabeled => "train_labeled",
            SplitTag::TrainUnlabeled => "train_unlabeled",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<SplitTag> {
        match s {
            "train_labeled" => Some(SplitTag::TrainLabeled),
            "train_unlabeled" => Some(SplitTag::TrainUnlabeled),
            "test" => Some(SplitTag::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub image: Volume,
    pub labels: LabelVolume,
    pub tag: SplitTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn indices_with_tag(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].tag == tag)
            .collect()
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 200;

/// Generates `n` annotated volumes. Item `i` draws only from the stream
/// derived from (seed, i); all items start tagged `TrainLabeled`.
pub fn generate(spec: &SynthSpec, n: usize) -> Result<Dataset, SynthError> {
    spec.validate()?;
    if n == 0 {
        return Err(SynthError::InfeasibleSpec("zero items requested".into()));
    }
    let items: Result<Vec<DatasetItem>, SynthError> =
        (0..n).into_par_iter().map(|i| generate_item(spec, i)).collect();
    Ok(Dataset { items: items? })
}

/// One item from its own RNG stream; used by `generate` and directly by
/// tests that compare serial against parallel output.
pub fn generate_item(spec: &SynthSpec, index: usize) -> Result<DatasetItem, SynthError> {
    let mut rng = SplitMix64::derive(spec.seed, index as u64);
    let n = voxel_count(spec.dims);
    let mut labels = vec![0u8; n];
    let mut placed = false;
    for _attempt in 0..MAX_PLACEMENT_ATTEMPTS {
        labels.iter_mut().for_each(|l| *l = 0);
        paint_shapes(spec, &mut rng, &mut labels);
        if all_classes_present(&labels, spec.num_classes) {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(SynthError::InfeasibleSpec(format!(
            "item {index}: could not realize all {} classes in {} attempts",
            spec.num_classes, MAX_PLACEMENT_ATTEMPTS
        )));
    }
    let mut data = vec![0.0f64; n];
    for (v, &l) in data.iter_mut().zip(&labels) {
        *v = spec.intensity_means[l as usize];
    }
    if spec.noise_sigma > 0.0 {
        for v in data.iter_mut() {
            *v += spec.noise_sigma * rng.next_gaussian();
        }
    }
    let image = Volume::new(spec.dims, spec.spacing, data).expect("constructed in range");
    let labels = LabelVolume::new(spec.dims, spec.spacing, labels, spec.num_classes)
        .expect("labels painted in range");
    Ok(DatasetItem {
        image,
        labels,
        tag: SplitTag::TrainLabeled,
    })
}

fn all_classes_present(labels: &[u8], num_classes: usize) -> bool {
    let mut seen = [false; 4];
    let mut remaining = num_classes;
    for &l in labels {
        if !seen[l as usize] {
            seen[l as usize] = true;
            remaining -= 1;
            if remaining == 0 {
                return true;
            }
        }
    }
    false
}

/// Spheres paint class 1, then tubes paint class 2 (class 1 when there are
/// only two classes), overwriting. Draw order is part of the format: sphere
/// count, per-sphere (radius, cx, cy, cz), tube count, per-tube (radius,
/// orientation, anchor).
fn paint_shapes(spec: &SynthSpec, rng: &mut SplitMix64, labels: &mut [u8]) {
    let (nx, ny, nz) = spec.dims;
    let dims_f = [nx as f64 - 1.0, ny as f64 - 1.0, nz as f64 - 1.0];
    let tube_class: u8 = if spec.num_classes == 3 { 2 } else { 1 };

    let draw_count = |rng: &mut SplitMix64, r: (usize, usize)| {
        if r.0 == r.1 {
            r.0
        } else {
            r.0 + rng.next_range(r.1 - r.0 + 1)
        }
    };
    let draw_radius = |rng: &mut SplitMix64, r: (f64, f64)| {
        if r.0 == r.1 {
            r.0
        } else {
            rng.next_uniform(r.0, r.1)
        }
    };

    let n_spheres = draw_count(rng, spec.spheres.count);
    for _ in 0..n_spheres {
        let r = draw_radius(rng, spec.spheres.radius);
        let mut c = [0.0f64; 3];
        for k in 0..3 {
            c[k] = rng.next_uniform(r, dims_f[k] - r);
        }
        paint_sphere(spec.dims, labels, c, r, 1);
    }

    let n_tubes = draw_count(rng, spec.tubes.count);
    let n_orientations: usize = if spec.diagonal_tubes { 7 } else { 3 };
    for _ in 0..n_tubes {
        let r = draw_radius(rng, spec.tubes.radius);
        let o = rng.next_range(n_orientations);
        let mut anchor = [0.0f64; 3];
        for k in 0..3 {
            anchor[k] = rng.next_uniform(r, dims_f[k] - r);
        }
        let dir = match o {
            0 => [1.0, 0.0, 0.0],
            1 => [0.0, 1.0, 0.0],
            2 => [0.0, 0.0, 1.0],
            3 => [1.0, 1.0, 1.0],
            4 => [1.0, 1.0, -1.0],
            5 => [1.0, -1.0, 1.0],
            _ => [-1.0, 1.0, 1.0],
        };
        paint_tube(spec.dims, labels, anchor, dir, r, tube_class);
    }
}

fn paint_sphere(dims: Dims, labels: &mut [u8], c: [f64; 3], r: f64, class: u8) {
    let (nx, ny, _nz) = dims;
    let r2 = r * r;
    let lo = |v: f64| (v - r).floor().max(0.0) as usize;
    let hi = |v: f64, n: usize| ((v + r).ceil() as usize).min(n - 1);
    for z in lo(c[2])..=hi(c[2], dims.2) {
        let dz = z as f64 - c[2];
        for y in lo(c[1])..=hi(c[1], dims.1) {
            let dy = y as f64 - c[1];
            for x in lo(c[0])..=hi(c[0], dims.0) {
                let dx = x as f64 - c[0];
                if dx * dx + dy * dy + dz * dz <= r2 {
                    labels[x + nx * (y + ny * z)] = class;
                }
            }
        }
    }
}

/// Infinite cylinder around the line through `anchor` with direction `dir`
/// (not necessarily unit), clipped to the volume.
fn paint_tube(dims: Dims, labels: &mut [u8], anchor: [f64; 3], dir: [f64; 3], r: f64, class: u8) {
    let (nx, ny, nz) = dims;
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let u = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
    let r2 = r * r;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = [
                    x as f64 - anchor[0],
                    y as f64 - anchor[1],
                    z as f64 - anchor[2],
                ];
                let t = v[0] * u[0] + v[1] * u[1] + v[2] * u[2];
                let d2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - t * t;
                if d2 <= r2 {
                    labels[x + nx * (y + ny * z)] = class;
                }
            }
        }
    }
}

/// Fractions of items tagged labeled / unlabeled / test; must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitPolicy {
    pub frac_labeled: f64,
    pub frac_unlabeled: f64,
    pub frac_test: f64,
    pub seed: u64,
}

/// Largest-remainder apportionment of `n` into integer counts proportional
/// to `fracs`; ties go to the earlier slot.
fn apportion(n: usize, fracs: [f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut rema = [0.0f64; 3];
    let mut assigned = 0;
    for k in 0..3 {
        let exact = fracs[k] * n as f64;
        counts[k] = exact.floor() as usize;
        rema[k] = exact - exact.floor();
        assigned += counts[k];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rema[b].partial_cmp(&rema[a]).unwrap().then(a.cmp(&b)));
    let mut left = n - assigned;
    for &k in &order {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Re-tags items by a seeded shuffle followed by proportional assignment.
pub fn split(mut d: Dataset, policy: &SplitPolicy) -> Result<Dataset, SynthError> {
    let total = policy.frac_labeled + policy.frac_unlabeled + policy.frac_test;
    if (total - 1.0).abs() > 1e-9
        || policy.frac_labeled < 0.0
        || policy.frac_unlabeled < 0.0
        || policy.frac_test < 0.0
    {
        return Err(SynthError::BadFractions(total));
    }
    let n = d.items.len();
    let counts = apportion(
        n,
        [policy.frac_labeled, policy.frac_unlabeled, policy.frac_test],
    );
    if counts[0] == 0 {
        return Err(SynthError::EmptyLabeledSplit);
    }
    // shuffle stream is independent of the per-item generation streams
    const SPLIT_STREAM: u64 = 0x73706c6974; // "split"
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::derive(policy.seed, SPLIT_STREAM);
    rng.shuffle(&mut order);
    for (pos, &item) in order.iter().enumerate() {
        d.items[item].tag = if pos < counts[0] {
            SplitTag::TrainLabeled
        } else if pos < counts[0] + counts[1] {
            SplitTag::TrainUnlabeled
        } else {
            SplitTag::Test
        };
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    fn base_spec() -> SynthSpec {
        SynthSpec {
            dims: (24, 24, 24),
            spacing: (1.0, 1.0, 1.0),
            num_classes: 3,
            spheres: ShapeRange { count: (1, 2), radius: (3.0, 5.0) },
            tubes: ShapeRange { count: (1, 2), radius: (2.0, 3.0) },
            diagonal_tubes: true,
            noise_sigma: 0.2,
            intensity_means: vec![0.0, 1.0, 2.0],
            seed: 11,
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = base_spec();
        s.intensity_means = vec![0.0, 1.0, 1.0];
        assert!(matches!(s.validate(), Err(SynthError::InfeasibleSpec(_))));
        let mut s = base_spec();
        s.spheres.radius = (3.0, 14.0);
        assert!(s.validate().is_err());
        let mut s = base_spec();
        s.num_classes = 4;
        s.intensity_means = vec![0.0, 1.0, 2.0, 3.0];
        assert!(s.validate().is_err());
        let mut s = base_spec();
        s.spheres.count = (0, 2);
        assert!(s.validate().is_err());
        let mut s = base_spec();
        s.noise_sigma = -0.5;
        assert!(s.validate().is_err());
        assert!(base_spec().validate().is_ok());
    }

    #[test]
    fn noiseless_volume_hits_exact_means() {
        let mut s = base_spec();
        s.noise_sigma = 0.0;
        let d = generate(&s, 3).unwrap();
        for item in &d.items {
            for (v, &l) in item.image.data().iter().zip(item.labels.labels()) {
                assert_eq!(*v, s.intensity_means[l as usize]);
            }
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let s = base_spec();
        let a = generate(&s, 4).unwrap();
        let b = generate(&s, 4).unwrap();
        assert_eq!(a, b);
        let mut s2 = s.clone();
        s2.seed = 12;
        let c = generate(&s2, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_volume_contains_all_classes() {
        let mut s = base_spec();
        s.dims = (32, 32, 32);
        let d = generate(&s, 20).unwrap();
        assert_eq!(d.items.len(), 20);
        for item in &d.items {
            let mut seen = [false; 3];
            for &l in item.labels.labels() {
                seen[l as usize] = true;
            }
            assert_eq!(seen, [true; 3]);
        }
    }

    #[test]
    fn parallel_matches_serial_per_item() {
        let s = base_spec();
        let parallel = generate(&s, 6).unwrap();
        for i in 0..6 {
            let serial = generate_item(&s, i).unwrap();
            assert_eq!(parallel.items[i], serial);
        }
    }

    #[test]
    fn class_conditional_intensities_are_gaussian() {
        let mut s = base_spec();
        s.dims = (28, 28, 28);
        s.noise_sigma = 0.3;
        let d = generate(&s, 2).unwrap();
        for item in &d.items {
            for class in 0..3u8 {
                let vals: Vec<f64> = item
                    .image
                    .data()
                    .iter()
                    .zip(item.labels.labels())
                    .filter(|(_, &l)| l == class)
                    .map(|(v, _)| *v)
                    .collect();
                assert!(vals.len() > 50, "class {class} too small to test");
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let tol = 5.0 * s.noise_sigma / n.sqrt();
                assert!(
                    (mean - s.intensity_means[class as usize]).abs() < tol.max(0.02),
                    "class {class} mean {mean}"
                );
                assert!((var.sqrt() - s.noise_sigma).abs() < 0.05, "class {class} sd");
            }
        }
    }

    #[test]
    fn nearest_mean_classifier_clears_dice_floor() {
        // noise well below half the smallest mean gap: the foreground shapes
        // are small next to the background, so the per-voxel error rate has
        // to be tiny for per-class Dice to survive the imbalance
        let mut s = base_spec();
        s.dims = (32, 32, 32);
        s.noise_sigma = 0.125;
        let d = generate(&s, 4).unwrap();
        for item in &d.items {
            let pred: Vec<u8> = item
                .image
                .data()
                .iter()
                .map(|v| {
                    let mut best = 0usize;
                    let mut bd = f64::INFINITY;
                    for (c, m) in s.intensity_means.iter().enumerate() {
                        let dd = (v - m).abs();
                        if dd < bd {
                            bd = dd;
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            let pred =
                LabelVolume::new(item.labels.dims(), item.labels.spacing(), pred, 3).unwrap();
            for class in 1..3u8 {
                let dc = dice(&pred, &item.labels, class).unwrap();
                assert!(dc > 0.9, "class {class} dice {dc}");
            }
        }
    }

    #[test]
    fn split_apportions_and_is_deterministic() {
        let s = base_spec();
        let d = generate(&s, 10).unwrap();
        let p = SplitPolicy {
            frac_labeled: 0.5,
            frac_unlabeled: 0.5,
            frac_test: 0.0,
            seed: 7,
        };
        let a = split(d.clone(), &p).unwrap();
        assert_eq!(a.indices_with_tag(SplitTag::TrainLabeled).len(), 5);
        assert_eq!(a.indices_with_tag(SplitTag::TrainUnlabeled).len(), 5);
        assert_eq!(a.indices_with_tag(SplitTag::Test).len(), 0);
        let b = split(d, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_single_item_all_labeled() {
        let s = base_spec();
        let d = generate(&s, 1).unwrap();
        let p = SplitPolicy { frac_labeled: 1.0, frac_unlabeled: 0.0, frac_test: 0.0, seed: 1 };
        let out = split(d, &p).unwrap();
        assert_eq!(out.items[0].tag, SplitTag::TrainLabeled);
    }

    #[test]
    fn split_rejects_empty_labeled_and_bad_fractions() {
        let s = base_spec();
        let d = generate(&s, 6).unwrap();
        let p = SplitPolicy { frac_labeled: 0.0, frac_unlabeled: 0.5, frac_test: 0.5, seed: 1 };
        assert_eq!(split(d.clone(), &p), Err(SynthError::EmptyLabeledSplit));
        let p = SplitPolicy { frac_labeled: 0.5, frac_unlabeled: 0.2, frac_test: 0.2, seed: 1 };
        assert!(matches!(
            split(d, &p),
            Err(SynthError::BadFractions(t)) if (t - 0.9).abs() < 1e-9
        ));
    }

    #[test]
    fn split_two_thirds_on_24_items() {
        let s = base_spec();
        let d = generate(&s, 24).unwrap();
        let p = SplitPolicy {
            frac_labeled: 2.0 / 3.0,
            frac_unlabeled: 0.0,
            frac_test: 1.0 / 3.0,
            seed: 3,
        };
        let out = split(d, &p).unwrap();
        assert_eq!(out.indices_with_tag(SplitTag::TrainLabeled).len(), 16);
        assert_eq!(out.indices_with_tag(SplitTag::Test).len(), 8);
    }

    #[test]
    fn apportion_handles_remainders() {
        assert_eq!(apportion(10, [0.5, 0.5, 0.0]), [5, 5, 0]);
        assert_eq!(apportion(7, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]), [3, 2, 2]);
        assert_eq!(apportion(0, [1.0, 0.0, 0.0]), [0, 0, 0]);
    }
}
