//! Synthetic phantom corpus: volumes with planted primitives and a report
//! that names each one.
//!
//! Each catalog entry is a (shape kind, intensity band, location bin) triple
//! and renders to the phrase `"<band> <kind> in <x> <y> <z> region"`. The grid
//! is split into 3x3x2 location bins; a phantom places `n_shapes` entries in
//! distinct bins, so on the default grid every primitive is a separate
//! 6-connected component above [`COMPONENT_THRESHOLD`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::io::write_volume;
use super::manifest::{assign_splits, write_manifest, SampleRecord, MANIFEST_FILE, VOCAB_FILE};
use super::tokenizer::{words, Vocab};
use super::volume::Volume;
use crate::error::{Error, Result};
use crate::rng::child_rng;

pub const BACKGROUND_MAX: f32 = 0.2;
pub const COMPONENT_THRESHOLD: f32 = 0.3;
const SHAPE_NOISE: f32 = 0.03;
pub const BINS: [usize; 3] = [3, 3, 2];
const X_WORDS: [&str; 3] = ["left", "center", "right"];
const Y_WORDS: [&str; 3] = ["anterior", "middle", "posterior"];
const Z_WORDS: [&str; 2] = ["upper", "lower"];
pub const NO_FINDINGS: &str = "no findings";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Ellipsoid,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Ellipsoid];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Ellipsoid => "ellipsoid",
        }
    }

    /// Per-axis radii in voxels given the bin half-widths.
    fn radii(self, half: [f64; 3]) -> [f64; 3] {
        let m = half.iter().copied().fold(f64::INFINITY, f64::min);
        match self {
            ShapeKind::Sphere => [0.6 * m; 3],
            ShapeKind::Box => [0.45 * m; 3],
            ShapeKind::Ellipsoid => [0.7 * half[0], 0.35 * half[1], 0.35 * half[2]],
        }
    }

    fn contains(self, d: [f64; 3], r: [f64; 3]) -> bool {
        let u = [d[0] / r[0], d[1] / r[1], d[2] / r[2]];
        match self {
            ShapeKind::Box => u.iter().all(|v| v.abs() <= 1.0),
            ShapeKind::Sphere | ShapeKind::Ellipsoid => u.iter().map(|v| v * v).sum::<f64>() <= 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Dim,
    Medium,
    Bright,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Dim, Band::Medium, Band::Bright];

    pub fn word(self) -> &'static str {
        match self {
            Band::Dim => "dim",
            Band::Medium => "medium",
            Band::Bright => "bright",
        }
    }

    pub fn intensity(self) -> f32 {
        match self {
            Band::Dim => 0.45,
            Band::Medium => 0.7,
            Band::Bright => 0.95,
        }
    }
}

/// Cell of the 3x3x2 location grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocationBin(pub [u8; 3]);

impl LocationBin {
    pub fn all() -> Vec<LocationBin> {
        let mut out = Vec::new();
        for z in 0..BINS[2] as u8 {
            for y in 0..BINS[1] as u8 {
                for x in 0..BINS[0] as u8 {
                    out.push(LocationBin([x, y, z]));
                }
            }
        }
        out
    }

    fn valid(self) -> bool {
        (0..3).all(|a| (self.0[a] as usize) < BINS[a])
    }

    pub fn phrase(self) -> String {
        format!(
            "{} {} {}",
            X_WORDS[self.0[0] as usize], Y_WORDS[self.0[1] as usize], Z_WORDS[self.0[2] as usize]
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub kind: ShapeKind,
    pub band: Band,
    pub bin: LocationBin,
}

impl CatalogEntry {
    pub fn phrase(&self) -> String {
        format!("{} {} in {} region", self.band.word(), self.kind.word(), self.bin.phrase())
    }
}

/// A labelled attribute: present in a report iff its phrase occurs as a
/// contiguous word sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub phrase: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid_dims: [usize; 3],
    pub spacing: [f32; 3],
    pub n_shapes: usize,
    pub shape_catalog: Vec<CatalogEntry>,
    pub vocab: Vec<String>,
    pub rng_seed: u64,
}

pub fn default_catalog() -> Vec<CatalogEntry> {
    let mut out = Vec::new();
    for bin in LocationBin::all() {
        for kind in ShapeKind::ALL {
            for band in Band::ALL {
                out.push(CatalogEntry { kind, band, bin });
            }
        }
    }
    out
}

pub fn default_vocab() -> Vec<String> {
    let mut v: Vec<String> = ["no", "findings", "in", "region"].iter().map(|s| s.to_string()).collect();
    v.extend(ShapeKind::ALL.iter().map(|k| k.word().to_string()));
    v.extend(Band::ALL.iter().map(|b| b.word().to_string()));
    v.extend(X_WORDS.iter().chain(&Y_WORDS).chain(&Z_WORDS).map(|s| s.to_string()));
    v
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_dims: [32, 32, 16],
            spacing: [1.0, 1.0, 4.0],
            n_shapes: 3,
            shape_catalog: default_catalog(),
            vocab: default_vocab(),
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_dims.iter().any(|&d| d < 8) {
            return Err(Error::Spec(format!("grid dims {:?} must each be >= 8", self.grid_dims)));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Spec(format!("spacing {:?} must be positive", self.spacing)));
        }
        if self.n_shapes > 0 && self.shape_catalog.is_empty() {
            return Err(Error::Spec("empty shape catalog with n_shapes > 0".into()));
        }
        if let Some(e) = self.shape_catalog.iter().find(|e| !e.bin.valid()) {
            return Err(Error::Spec(format!("location bin {:?} outside the 3x3x2 grid", e.bin.0)));
        }
        let mut bins: Vec<LocationBin> = self.shape_catalog.iter().map(|e| e.bin).collect();
        bins.sort();
        bins.dedup();
        if self.n_shapes > bins.len() {
            return Err(Error::Spec(format!(
                "{} shapes need distinct bins but the catalog covers only {}",
                self.n_shapes,
                bins.len()
            )));
        }
        let vocab: Vec<String> = self.vocab.iter().map(|w| w.to_lowercase()).collect();
        let mut needed = words(NO_FINDINGS);
        for e in &self.shape_catalog {
            needed.extend(words(&e.phrase()));
        }
        if let Some(w) = needed.iter().find(|w| !vocab.contains(w)) {
            return Err(Error::Spec(format!("report word `{w}` missing from the vocabulary")));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocab {
        Vocab::from_words(&self.vocab)
    }

    /// Kinds, then bands, then location bins, in catalog order.
    pub fn attributes(&self) -> Vec<Attribute> {
        let mut out: Vec<Attribute> = Vec::new();
        let mut push = |name: String, phrase: String| {
            if !out.iter().any(|a| a.name == name) {
                out.push(Attribute { name, phrase });
            }
        };
        for e in &self.shape_catalog {
            push(e.kind.word().into(), e.kind.word().into());
        }
        for e in &self.shape_catalog {
            push(e.band.word().into(), e.band.word().into());
        }
        for e in &self.shape_catalog {
            let p = e.bin.phrase();
            push(p.replace(' ', "_"), p);
        }
        out
    }

    fn bin_half_widths(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.grid_dims[a] as f64 / BINS[a] as f64 / 2.0)
    }
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub report: String,
    pub labels: BTreeMap<String, u8>,
    /// Catalog entries that were rendered, in report order.
    pub shapes: Vec<CatalogEntry>,
}

/// Whether `phrase` occurs in `text` as a contiguous run of words.
pub fn contains_phrase(text: &str, phrase: &str) -> bool {
    let t = words(text);
    let p = words(phrase);
    !p.is_empty() && t.windows(p.len()).any(|w| w == p.as_slice())
}

pub fn generate_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.grid_dims;
    let mut volume = Volume::from_fn(dims, spec.spacing, |_, _, _| 0.0)?;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                volume.set(x, y, z, rng.gen_range(0.0..BACKGROUND_MAX));
            }
        }
    }

    let mut order: Vec<usize> = (0..spec.shape_catalog.len()).collect();
    order.shuffle(rng);
    let mut chosen: Vec<usize> = Vec::with_capacity(spec.n_shapes);
    for i in order {
        if chosen.len() == spec.n_shapes {
            break;
        }
        let bin = spec.shape_catalog[i].bin;
        if chosen.iter().all(|&c| spec.shape_catalog[c].bin != bin) {
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    let shapes: Vec<CatalogEntry> = chosen.iter().map(|&i| spec.shape_catalog[i]).collect();

    let half = spec.bin_half_widths();
    for e in &shapes {
        let radii = e.kind.radii(half);
        let mut center = [0f64; 3];
        for a in 0..3 {
            let width = dims[a] as f64 / BINS[a] as f64;
            let jitter = 0.15 * half[a];
            center[a] = (e.bin.0[a] as f64 + 0.5) * width - 0.5 + rng.gen_range(-jitter..=jitter);
        }
        let lo = [0, 1, 2].map(|a| (center[a] - radii[a]).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| ((center[a] + radii[a]).ceil() as usize).min(dims[a] - 1));
        let nearest = [0, 1, 2].map(|a| (center[a].round().max(0.0) as usize).min(dims[a] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let d = [x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]];
                    if e.kind.contains(d, radii) || [x, y, z] == nearest {
                        let v = e.band.intensity() + rng.gen_range(-SHAPE_NOISE..SHAPE_NOISE);
                        volume.set(x, y, z, v.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    let volume = volume.with_unit_range()?;

    let report = if shapes.is_empty() {
        NO_FINDINGS.to_string()
    } else {
        let phrases: Vec<String> = shapes.iter().map(CatalogEntry::phrase).collect();
        format!("{}.", phrases.join(". "))
    };
    let labels = spec
        .attributes()
        .into_iter()
        .map(|a| {
            let present = u8::from(contains_phrase(&report, &a.phrase));
            (a.name, present)
        })
        .collect();
    Ok(Phantom {
        volume,
        report,
        labels,
        shapes,
    })
}

/// Zero-shot prompt pair per attribute: the phrase and `"no <phrase>"`.
pub fn default_prompts(spec: &PhantomSpec) -> BTreeMap<String, crate::evaluation::PromptPair> {
    spec.attributes()
        .into_iter()
        .map(|a| {
            let pair = crate::evaluation::PromptPair {
                positive: a.phrase.clone(),
                negative: format!("no {}", a.phrase),
            };
            (a.name, pair)
        })
        .collect()
}

pub const PROMPTS_FILE: &str = "prompts.json";

/// Writes `n` phantoms plus manifest, vocabulary and default prompts under `out`.
/// Sample `k` draws from a generator derived from `(seed, k)`.
pub fn write_corpus(spec: &PhantomSpec, n: usize, seed: u64, out: &Path) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let vol_dir = out.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let ids: Vec<String> = (0..n).map(|k| format!("phantom-{k:05}")).collect();
    let splits = assign_splits(&ids);
    let mut records = Vec::with_capacity(n);
    for (k, (id, split)) in ids.into_iter().zip(splits).enumerate() {
        let mut rng = child_rng(seed, "phantom", k as u64);
        let p = generate_phantom(spec, &mut rng)?;
        let rel = format!("volumes/{id}.t3dv");
        write_volume(&p.volume, out.join(&rel))?;
        records.push(SampleRecord {
            id,
            volume_path: rel,
            report_text: p.report,
            labels: p.labels,
            split,
        });
    }
    write_manifest(&records, out.join(MANIFEST_FILE))?;
    spec.vocabulary().write(out.join(VOCAB_FILE))?;
    let prompts = serde_json::to_string_pretty(&default_prompts(spec))?;
    let ppath = out.join(PROMPTS_FILE);
    fs::write(&ppath, prompts + "\n").map_err(|e| Error::io(&ppath, e))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Number of 6-connected components above the threshold, by flood fill.
    fn components(v: &Volume, threshold: f32) -> usize {
        let [w, h, s] = v.dims();
        let mut seen = vec![false; v.len()];
        let mut count = 0;
        for start in 0..v.len() {
            if seen[start] || v.voxels()[start] <= threshold {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y, z) = (i % w, (i / w) % h, i / (w * h));
                let mut nb = Vec::with_capacity(6);
                if x > 0 { nb.push(i - 1); }
                if x + 1 < w { nb.push(i + 1); }
                if y > 0 { nb.push(i - w); }
                if y + 1 < h { nb.push(i + w); }
                if z > 0 { nb.push(i - w * h); }
                if z + 1 < s { nb.push(i + w * h); }
                for j in nb {
                    if !seen[j] && v.voxels()[j] > threshold {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn zero_shapes_gives_background_and_no_findings() {
        let spec = PhantomSpec { n_shapes: 0, ..Default::default() };
        let p = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.report, "no findings");
        assert!(p.labels.values().all(|&l| l == 0));
        assert!(p.volume.voxels().iter().all(|&v| v < BACKGROUND_MAX));
        assert_eq!(components(&p.volume, COMPONENT_THRESHOLD), 0);
    }

    #[test]
    fn same_seed_same_phantom() {
        let spec = PhantomSpec { n_shapes: 2, ..Default::default() };
        let a = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.volume.voxels().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.volume.voxels().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn each_phrase_is_one_component() {
        let spec = PhantomSpec::default();
        for seed in 0..40 {
            let p = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let phrases = p.report.split('.').filter(|s| !s.trim().is_empty()).count();
            assert_eq!(phrases, spec.n_shapes);
            assert_eq!(components(&p.volume, COMPONENT_THRESHOLD), phrases, "seed {seed}");
        }
    }

    #[test]
    fn labels_agree_with_report_text() {
        let spec = PhantomSpec::default();
        for seed in 0..20 {
            let p = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for a in spec.attributes() {
                let expected = p.shapes.iter().any(|e| {
                    e.kind.word() == a.phrase || e.band.word() == a.phrase || e.bin.phrase() == a.phrase
                });
                assert_eq!(p.labels[&a.name] == 1, expected, "{} in {}", a.name, p.report);
            }
        }
    }

    #[test]
    fn spec_errors() {
        let spec = PhantomSpec { shape_catalog: vec![], n_shapes: 1, ..Default::default() };
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
        let spec = PhantomSpec { grid_dims: [7, 8, 8], ..Default::default() };
        assert!(spec.validate().is_err());
        let spec = PhantomSpec { vocab: vec!["no".into()], ..Default::default() };
        assert!(spec.validate().is_err());
        let spec = PhantomSpec { n_shapes: 19, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn default_attributes() {
        let attrs = PhantomSpec::default().attributes();
        assert_eq!(attrs.len(), 3 + 3 + 18);
        assert_eq!(attrs[0].name, "sphere");
        assert!(attrs.iter().any(|a| a.name == "left_anterior_upper" && a.phrase == "left anterior upper"));
    }
}
