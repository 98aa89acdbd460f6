//! Synthetic brain-tumour phantoms with a controllable appearance shift.
//!
//! Each case is a brain ellipsoid holding three nested tumour ellipsoids:
//! necrotic core (label 1) inside an enhancing shell (label 3) inside edema
//! (label 2), so the WT/TC/ET region algebra applies unchanged. Source and
//! target cases draw geometry from the same distribution and differ only in
//! the appearance model applied on top of the clean tissue intensities.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tta_core::seed::stream;
use tta_core::volume::{gaussian_blur, LabelMap, Volume};

pub const CLASS_COUNT: u16 = 4;

/// Mean tissue intensity per modality for background brain, necrosis (1),
/// edema (2) and enhancing tumour (3).
const TISSUE: [[f64; 4]; 4] = [
    [1.0, 0.5, 0.9, 1.9],
    [1.0, 1.2, 1.7, 1.4],
    [1.0, 1.8, 1.6, 1.3],
    [1.0, 0.6, 0.8, 0.9],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Appearance {
    pub gain: f64,
    /// Added to every brain voxel after the gain.
    pub offset: f64,
    /// Peak relative deviation of the multiplicative bias field.
    pub bias_amplitude: f64,
    /// Standard deviation of additive Gaussian noise inside the brain.
    pub noise_sigma: f64,
    /// Resolution blur, in voxels.
    pub blur_sigma: f64,
}

impl Appearance {
    pub fn source() -> Self {
        Appearance {
            gain: 1.0,
            offset: 0.0,
            bias_amplitude: 0.05,
            noise_sigma: 0.04,
            blur_sigma: 0.0,
        }
    }

    pub fn target() -> Self {
        Appearance {
            gain: 0.8,
            offset: 0.2,
            bias_amplitude: 0.3,
            noise_sigma: 0.2,
            blur_sigma: 0.5,
        }
    }
}

impl Default for Appearance {
    fn default() -> Self {
        Self::source()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Acquisition grid before preprocessing.
    pub raw_dims: [usize; 3],
    pub spacing: [f64; 3],
    pub modalities: usize,
    pub source_cases: usize,
    pub target_cases: usize,
    /// Range of the whole-tumour semi-axes, in voxels.
    pub tumor_radius: [f64; 2],
    /// Range of the tumour-core to whole-tumour radius ratio.
    pub core_fraction: [f64; 2],
    /// Range of the necrosis to tumour-core radius ratio.
    pub necrosis_fraction: [f64; 2],
    pub source: Appearance,
    pub target: Appearance,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            raw_dims: [36, 40, 32],
            spacing: [1.0, 1.0, 1.25],
            modalities: 2,
            source_cases: 20,
            target_cases: 10,
            tumor_radius: [5.0, 8.5],
            core_fraction: [0.55, 0.75],
            necrosis_fraction: [0.35, 0.6],
            source: Appearance::source(),
            target: Appearance::target(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=TISSUE.len()).contains(&self.modalities) {
            return Err(format!("modalities must be in 1..={}, got {}", TISSUE.len(), self.modalities));
        }
        if self.raw_dims.iter().any(|&d| d < 16) {
            return Err(format!("raw_dims {:?} must be at least 16 on every axis", self.raw_dims));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err("spacing must be positive".into());
        }
        let ranges = [
            ("tumor_radius", self.tumor_radius, f64::INFINITY),
            ("core_fraction", self.core_fraction, 1.0),
            ("necrosis_fraction", self.necrosis_fraction, 1.0),
        ];
        for (name, [lo, hi], max) in ranges {
            if !(lo > 0.0 && lo <= hi && hi <= max) {
                return Err(format!("{name} must satisfy 0 < lo <= hi <= {max}"));
            }
        }
        let min_extent = *self.raw_dims.iter().min().expect("three axes") as f64;
        if self.tumor_radius[1] * 1.15 > 0.35 * min_extent {
            return Err("tumor_radius too large for raw_dims".into());
        }
        for a in [&self.source, &self.target] {
            if !(a.gain > 0.0) || a.bias_amplitude < 0.0 || a.bias_amplitude >= 1.0 || a.noise_sigma < 0.0 || a.blur_sigma < 0.0 {
                return Err("appearance needs gain > 0, bias_amplitude in [0, 1), non-negative noise and blur".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    Target,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Split::Source => "src",
            Split::Target => "tgt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub id: String,
    pub split: Split,
    pub image: Volume,
    pub labels: LabelMap,
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }
}

/// Brain, whole tumour, tumour core and necrosis ellipsoids.
fn geometry<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> [Ellipsoid; 4] {
    let dims = spec.raw_dims.map(|d| d as f64);
    let brain = Ellipsoid {
        center: dims.map(|d| (d - 1.0) / 2.0 + rng.gen_range(-1.0..1.0)),
        radii: dims.map(|d| 0.42 * d * rng.gen_range(0.95..1.05)),
    };
    let base = uniform(rng, spec.tumor_radius);
    let wt_radii = [0; 3].map(|_| base * rng.gen_range(0.85..1.15));
    // Rejection-sample a centre that keeps the whole tumour inside the brain.
    let center = loop {
        let c: [f64; 3] = [0, 1, 2].map(|a| brain.center[a] + brain.radii[a] * rng.gen_range(-0.6..0.6));
        let fits: f64 = (0..3)
            .map(|a| ((c[a] - brain.center[a]) / (brain.radii[a] - wt_radii[a] - 1.0)).powi(2))
            .sum();
        if fits <= 1.0 {
            break c;
        }
    };
    let tc = uniform(rng, spec.core_fraction);
    let nec = tc * uniform(rng, spec.necrosis_fraction);
    [
        brain,
        Ellipsoid { center, radii: wt_radii },
        Ellipsoid {
            center,
            radii: wt_radii.map(|r| r * tc),
        },
        Ellipsoid {
            center,
            radii: wt_radii.map(|r| r * nec),
        },
    ]
}

fn coords(dims: [usize; 3]) -> impl Iterator<Item = [f64; 3]> {
    let [d, h, w] = dims;
    (0..d * h * w).map(move |i| [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64])
}

/// Low-order polynomial field `1 + amplitude * q` with `max |q| = 1` over the
/// brain.
fn bias_field<R: Rng>(dims: [usize; 3], brain: &[bool], amplitude: f64, rng: &mut R) -> Vec<f64> {
    let coef: [f64; 9] = [0.0; 9].map(|_| rng.gen_range(-1.0..1.0));
    let q: Vec<f64> = coords(dims)
        .map(|p| {
            let u = [0, 1, 2].map(|a| 2.0 * p[a] / (dims[a] as f64 - 1.0) - 1.0);
            let terms = [u[0], u[1], u[2], u[0] * u[0], u[1] * u[1], u[2] * u[2], u[0] * u[1], u[1] * u[2], u[0] * u[2]];
            terms.iter().zip(&coef).map(|(t, c)| t * c).sum()
        })
        .collect();
    let peak = q
        .iter()
        .zip(brain)
        .filter(|(_, &b)| b)
        .fold(0.0f64, |m, (v, _)| m.max(v.abs()))
        .max(1e-12);
    q.into_iter().map(|v| 1.0 + amplitude * v / peak).collect()
}

pub fn generate_case(spec: &PhantomSpec, split: Split, index: usize, root: u64) -> PhantomCase {
    let tag = format!("phantom/{}/{index}", split.name());
    let appearance = match split {
        Split::Source => spec.source,
        Split::Target => spec.target,
    };
    let dims = spec.raw_dims;
    let n: usize = dims.iter().product();
    let [brain, wt, tc, nec] = geometry(spec, &mut stream(root, &format!("{tag}/geometry")));

    let mut inside = vec![false; n];
    let mut labels = vec![0u16; n];
    for (i, p) in coords(dims).enumerate() {
        inside[i] = brain.level(p) <= 1.0;
        labels[i] = if nec.level(p) <= 1.0 {
            1
        } else if tc.level(p) <= 1.0 {
            3
        } else if wt.level(p) <= 1.0 {
            2
        } else {
            0
        };
    }

    let mut tex_rng = stream(root, &format!("{tag}/texture"));
    let mut data = vec![0.0; spec.modalities * n];
    for m in 0..spec.modalities {
        let jitter = [0; 4].map(|_| tex_rng.gen_range(0.95..1.05));
        let waves: Vec<([f64; 3], f64)> = (0..2)
            .map(|_| {
                let k = [0; 3].map(|_| tex_rng.gen_range(-0.4..0.4));
                (k, tex_rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        for (i, p) in coords(dims).enumerate() {
            if !inside[i] {
                continue;
            }
            let texture: f64 = 1.0 + waves.iter().map(|(k, ph)| 0.04 * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum::<f64>();
            let class = labels[i] as usize;
            data[m * n + i] = TISSUE[m][class] * jitter[class] * texture;
        }
    }

    let bias = bias_field(dims, &inside, appearance.bias_amplitude, &mut stream(root, &format!("{tag}/bias")));
    for m in 0..spec.modalities {
        for i in 0..n {
            if inside[i] {
                let v = &mut data[m * n + i];
                *v = (appearance.gain * *v + appearance.offset) * bias[i];
            }
        }
    }
    let mut image = Volume::new(spec.modalities, dims, spec.spacing, data).expect("phantom geometry");
    if appearance.blur_sigma > 0.0 {
        image = gaussian_blur(&image, [appearance.blur_sigma; 3]);
    }
    let mut noise_rng = stream(root, &format!("{tag}/noise"));
    for m in 0..spec.modalities {
        for i in 0..n {
            let v = &mut image.data[m * n + i];
            if inside[i] {
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                *v += appearance.noise_sigma * e;
            } else {
                *v = 0.0;
            }
        }
    }
    PhantomCase {
        id: format!("{}_{index:03}", split.prefix()),
        split,
        image,
        labels: LabelMap::new(dims, spec.spacing, labels, CLASS_COUNT).expect("labels in range"),
    }
}

/// Every source case followed by every target case.
pub fn generate(spec: &PhantomSpec, root: u64) -> Vec<PhantomCase> {
    let src = (0..spec.source_cases).map(|i| generate_case(spec, Split::Source, i, root));
    let tgt = (0..spec.target_cases).map(|i| generate_case(spec, Split::Target, i, root));
    src.chain(tgt).collect()
}
