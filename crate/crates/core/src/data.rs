//! Dataset manifests, speaker-disjoint splitting and the synthetic corpus.
//!
//! A synthetic utterance is a sum of one sinusoid per label field plus
//! white noise. Every (field, value) owns a slot on a 53 Hz grid starting at
//! 300 Hz: domains first, then intents, then each slot's values. Samples are quantized to 16-bit PCM so a WAV round trip is exact.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decoding::{LabelSpace, LabelVector};
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::features::{featurize, FeatureMatrix, Waveform, DEFAULT_SAMPLE_RATE, POWER_FLOOR};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Eval, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Test => "test",
        }
    }
}

/// One utterance: where its audio or features live and its label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// WAV path or feature-store id.
    pub source: String,
    pub label: LabelVector,
    pub speaker: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub label_space: LabelSpace,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(label_space: LabelSpace, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            label_space,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    /// Ids unique, labels valid in the label space.
    pub fn validate(&self) -> Result<()> {
        self.label_space.validate()?;
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::data(format!("duplicate id {:?}", e.id)));
            }
            self.label_space
                .check(&e.label)
                .map_err(|err| Error::data(format!("{}: {err}", e.id)))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Class ids present, for coverage checks.
    pub fn classes(&self) -> Result<BTreeSet<usize>> {
        self.entries
            .iter()
            .map(|e| self.label_space.label_to_class(&e.label))
            .collect()
    }
}

/// An utterance ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: FeatureMatrix,
    pub label: LabelVector,
}

/// Two values of one field whose tones sit 5 Hz apart instead of their
/// usual spacing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusablePair {
    /// Position in `[domain, intent, slot_1, …]`.
    pub field: usize,
    pub a: usize,
    pub b: usize,
}

/// Frequency gap of a confusable pair, in Hz.
pub const CONFUSABLE_GAP_HZ: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub intents: usize,
    pub slots: Vec<usize>,
    pub train: usize,
    pub eval: usize,
    pub test: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub sample_rate_hz: u32,
    /// Pseudo-speakers per split; speakers never cross splits.
    pub speakers_per_split: [usize; 3],
    pub confusable_pairs: Vec<ConfusablePair>,
    /// Fail when the train split cannot contain every class.
    pub require_coverage: bool,
}

impl Default for SyntheticSpec {
    /// 5 domains, 4 intents, slots of 3 and 2 values (120 classes);
    /// 2,400 / 300 / 300 utterances of 1–2 s.
    fn default() -> Self {
        Self {
            domains: 5,
            intents: 4,
            slots: vec![3, 2],
            train: 2400,
            eval: 300,
            test: 300,
            min_duration_s: 1.0,
            max_duration_s: 2.0,
            noise_std: 0.02,
            seed: 0,
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
            speakers_per_split: [40, 10, 10],
            confusable_pairs: Vec::new(),
            require_coverage: true,
        }
    }
}

impl SyntheticSpec {
    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::with_cardinalities(self.domains, self.intents, &self.slots)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Eval => self.eval,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let space = self.label_space()?;
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        if !(self.min_duration_s > 0.0 && self.min_duration_s <= self.max_duration_s) {
            return Err(Error::invalid("need 0 < min_duration_s <= max_duration_s"));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        let values: usize = space.fields().iter().map(|&f| space.cardinality(f)).sum();
        let top = tone_hz(values - 1);
        if top >= nyquist {
            return Err(Error::invalid(format!("highest tone {top} Hz is above Nyquist")));
        }
        for p in &self.confusable_pairs {
            let fields = space.fields();
            let f = *fields
                .get(p.field)
                .ok_or_else(|| Error::invalid(format!("confusable pair on missing field {}", p.field)))?;
            let n = space.cardinality(f);
            if p.a >= n || p.b >= n || p.a == p.b {
                return Err(Error::invalid(format!("bad confusable pair {p:?}")));
            }
        }
        let classes = space.class_count()?;
        if self.require_coverage && self.train < classes {
            return Err(Error::invalid(format!(
                "{} training utterances cannot cover {classes} classes",
                self.train
            )));
        }
        for (split, &s) in Split::ALL.iter().zip(&self.speakers_per_split) {
            if self.count(*split) > 0 && s == 0 {
                return Err(Error::invalid(format!("{} split needs at least one speaker", split.as_str())));
            }
        }
        Ok(())
    }

    /// Grid slot of value `id` in field position `field`: the fields take
    /// consecutive runs of the grid, so every value has its own tone.
    pub fn tone_slot(&self, field: usize, id: usize) -> usize {
        let cards = [self.domains, self.intents].into_iter().chain(self.slots.iter().copied());
        cards.take(field).sum::<usize>() + id
    }

    /// Tone frequency of `id` in field position `field`, honoring
    /// confusable pairs.
    pub fn frequency_hz(&self, field: usize, id: usize) -> f64 {
        for p in &self.confusable_pairs {
            if p.field == field && p.b == id {
                return tone_hz(self.tone_slot(field, p.a)) + CONFUSABLE_GAP_HZ;
            }
        }
        tone_hz(self.tone_slot(field, id))
    }
}

pub const TONE_BASE_HZ: f64 = 300.0;
/// Spacing of the tone grid. Any two values, in the same field or not, are
/// at least this far apart unless they form a confusable pair.
pub const TONE_STEP_HZ: f64 = 53.0;

/// Frequency of grid slot `slot`.
pub fn tone_hz(slot: usize) -> f64 {
    TONE_BASE_HZ + TONE_STEP_HZ * slot as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    pub label: LabelVector,
    pub waveform: Waveform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub label_space: LabelSpace,
    pub utterances: Vec<SyntheticUtterance>,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticUtterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// Manifest of one split; `source` is the utterance id.
    pub fn manifest(&self, split: Split) -> Manifest {
        Manifest {
            label_space: self.label_space.clone(),
            entries: self
                .split(split)
                .map(|u| ManifestEntry {
                    id: u.id.clone(),
                    source: u.id.clone(),
                    label: u.label.clone(),
                    speaker: Some(u.speaker.clone()),
                })
                .collect(),
        }
    }

    /// Featurizes one split (in parallel when enabled).
    pub fn examples(&self, split: Split) -> Result<Vec<Example>> {
        let utts: Vec<&SyntheticUtterance> = self.split(split).collect();
        map_ordered(&utts, |u| {
            Ok(Example {
                id: u.id.clone(),
                features: featurize(&u.waveform)?,
                label: u.label.clone(),
            })
        })
        .into_iter()
        .collect()
    }
}

/// Decorrelates a base seed from a stream of indices.
pub(crate) fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_mul(0xbf58_476d_1ce4_e5b9)).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Quantizes to the nearest 16-bit PCM level.
pub fn quantize_pcm16(x: f64) -> f64 {
    let clamped = x.clamp(-1.0, 1.0);
    math::round(clamped * 32767.0) / 32767.0
}

/// Waveform for `label`: unit-phase tones of equal amplitude per field,
/// plus Gaussian noise drawn from `rng`.
pub fn synthesize(
    spec: &SyntheticSpec,
    label: &LabelVector,
    duration_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Waveform> {
    let space = spec.label_space()?;
    space.check(label)?;
    let sr = spec.sample_rate_hz as f64;
    let n = math::round(duration_s * sr) as usize;
    let freqs: Vec<f64> = space
        .fields()
        .iter()
        .map(|&f| spec.frequency_hz(f.position(), label.get(f)))
        .collect();
    let amp = 0.8 / freqs.len() as f64;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = freqs
                .iter()
                .map(|&f| math::sin(2.0 * core::f64::consts::PI * f * t))
                .sum();
            let e = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            quantize_pcm16(amp * tone + e)
        })
        .collect();
    Waveform::new(samples, spec.sample_rate_hz)
}

/// `count` labels sampled uniformly; when `count` allows, the first
/// `class_count` draws are a permutation of every class.
fn sample_labels(space: &LabelSpace, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LabelVector>> {
    let classes = space.class_count()?;
    let mut ids: Vec<usize> = Vec::with_capacity(count);
    if count >= classes {
        ids.extend(0..classes);
    }
    while ids.len() < count {
        ids.push(rng.gen_range(0..classes));
    }
    ids.shuffle(rng);
    ids.into_iter().map(|c| space.class_to_label(c)).collect()
}

/// Generates the whole corpus, every utterance from its own derived seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let space = spec.label_space()?;
    let mut plan = Vec::new();
    let mut speaker_base = 0;
    for (si, split) in Split::ALL.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, si as u64]));
        let labels = sample_labels(&space, spec.count(*split), &mut rng)?;
        let speakers = spec.speakers_per_split[si];
        for (i, label) in labels.into_iter().enumerate() {
            let speaker = speaker_base + i % speakers.max(1);
            plan.push((*split, si, i, speaker, label));
        }
        speaker_base += speakers;
    }
    let utterances = map_ordered(&plan, |(split, si, i, speaker, label)| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[2, *si as u64, *i as u64]));
        let duration = if spec.max_duration_s > spec.min_duration_s {
            rng.gen_range(spec.min_duration_s..=spec.max_duration_s)
        } else {
            spec.min_duration_s
        };
        Ok(SyntheticUtterance {
            id: format!("{}-{:05}", split.as_str(), i),
            speaker: format!("spk{speaker:03}"),
            split: *split,
            label: label.clone(),
            waveform: synthesize(spec, label, duration, &mut rng)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        label_space: space,
        utterances,
    })
}

/// Smallest, over pairs of classes, of the largest per-dimension gap
/// between their mean noise-free feature vectors at `duration_s`.
pub fn class_signature_margin(spec: &SyntheticSpec, duration_s: f64) -> Result<f64> {
    let mut clean = spec.clone();
    clean.noise_std = 0.0;
    let space = clean.label_space()?;
    let classes: Vec<usize> = (0..space.class_count()?).collect();
    let means = map_ordered(&classes, |&c| -> Result<Vec<f64>> {
        let label = space.class_to_label(c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = featurize(&synthesize(&clean, &label, duration_s, &mut rng)?)?;
        let mut mean = vec![0.0; f.cols()];
        for r in 0..f.rows() {
            for (m, v) in mean.iter_mut().zip(f.row(r)) {
                *m += v / f.rows() as f64;
            }
        }
        Ok(mean)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut margin = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let gap = means[i]
                .iter()
                .zip(&means[j])
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            margin = margin.min(gap);
        }
    }
    Ok(margin)
}

/// Margin a learnable corpus must exceed.
pub const SEPARABILITY_THRESHOLD: f64 = 10.0 * POWER_FLOOR;

/// Splits `manifest` by speaker in proportions `ratios` (train, eval,
/// test), so no speaker appears in two splits and train holds every class
/// present in the manifest. Entries without a speaker count as their own
/// speaker.
pub fn split_dataset(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<[Manifest; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let key = e.speaker.clone().unwrap_or_else(|| format!("utt:{}", e.id));
        by_speaker.entry(key).or_default().push(i);
    }
    let speakers: Vec<&String> = by_speaker.keys().collect();
    let all_classes = manifest.classes()?;
    let n = manifest.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..256 {
        let mut order = speakers.clone();
        order.shuffle(&mut rng);
        let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let targets = [ratios[0] * n, (ratios[0] + ratios[1]) * n];
        let mut taken = 0usize;
        for s in order {
            let idx = &by_speaker[s];
            let mid = taken as f64 + idx.len() as f64 / 2.0;
            let k = if ratios[0] == 1.0 || mid < targets[0] {
                0
            } else if mid < targets[1] {
                1
            } else {
                2
            };
            let k = if ratios[k] == 0.0 { (0..3).find(|&j| ratios[j] > 0.0).unwrap_or(0) } else { k };
            parts[k].extend_from_slice(idx);
            taken += idx.len();
        }
        let train_classes: BTreeSet<usize> = parts[0]
            .iter()
            .map(|&i| manifest.label_space.label_to_class(&manifest.entries[i].label))
            .collect::<Result<_>>()?;
        if train_classes == all_classes {
            let build = |ix: &Vec<usize>| {
                let mut ix = ix.clone();
                ix.sort_unstable();
                Manifest {
                    label_space: manifest.label_space.clone(),
                    entries: ix.into_iter().map(|i| manifest.entries[i].clone()).collect(),
                }
            };
            return Ok([build(&parts[0]), build(&parts[1]), build(&parts[2])]);
        }
    }
    Err(Error::data(
        "no speaker-disjoint split puts every class in train; add speakers or raise the train ratio",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            domains: 2,
            intents: 2,
            slots: vec![2],
            train: 64,
            eval: 8,
            test: 8,
            min_duration_s: 0.3,
            max_duration_s: 0.5,
            speakers_per_split: [8, 2, 2],
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn coverage_of_every_class() {
        let c = generate_synthetic(&small()).unwrap();
        let train = c.manifest(Split::Train);
        assert_eq!(train.len(), 64);
        assert_eq!(train.classes().unwrap().len(), 8);
        let mut short = small();
        short.train = 7;
        assert!(generate_synthetic(&short).is_err());
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 1;
        assert_ne!(a, generate_synthetic(&other).unwrap());
    }

    #[test]
    fn noise_free_same_label_same_features() {
        let spec = SyntheticSpec { noise_std: 0.0, ..small() };
        let label = LabelVector::new(1, 0, vec![1]);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = featurize(&synthesize(&spec, &label, 0.4, &mut r1).unwrap()).unwrap();
        let b = featurize(&synthesize(&spec, &label, 0.4, &mut r2).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn samples_are_pcm_levels() {
        let c = generate_synthetic(&small()).unwrap();
        for s in c.utterances[0].waveform.samples() {
            let q = s * 32767.0;
            assert_eq!(q, math::round(q));
        }
    }

    #[test]
    fn classes_are_separable() {
        let margin = class_signature_margin(&small(), 0.5).unwrap();
        assert!(margin > SEPARABILITY_THRESHOLD, "{margin}");
    }

    #[test]
    fn confusable_pair_moves_one_tone() {
        let mut spec = small();
        spec.confusable_pairs.push(ConfusablePair { field: 0, a: 0, b: 1 });
        assert_eq!(spec.frequency_hz(0, 1), 305.0);
        assert_eq!(spec.frequency_hz(0, 0), 300.0);
        spec.confusable_pairs[0].b = 5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tones_of_different_fields_never_crowd() {
        let mut spec = SyntheticSpec::default();
        spec.confusable_pairs.push(ConfusablePair { field: 0, a: 0, b: 1 });
        let space = spec.label_space().unwrap();
        let mut tones = Vec::new();
        for f in space.fields() {
            for id in 0..space.cardinality(f) {
                tones.push((f.position(), id, spec.frequency_hz(f.position(), id)));
            }
        }
        assert_eq!(tones.len(), 14);
        assert_eq!(tones.last().unwrap().2, 300.0 + 53.0 * 13.0);
        for (i, a) in tones.iter().enumerate() {
            for b in &tones[i + 1..] {
                let gap = (a.2 - b.2).abs();
                let pair = a.0 == 0 && b.0 == 0 && a.1 + b.1 == 1;
                assert!(if pair { gap == CONFUSABLE_GAP_HZ } else { gap >= TONE_STEP_HZ }, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn speakers_do_not_cross_generated_splits() {
        let c = generate_synthetic(&small()).unwrap();
        let speakers = |s: Split| c.split(s).map(|u| u.speaker.clone()).collect::<BTreeSet<_>>();
        let (tr, ev, te) = (speakers(Split::Train), speakers(Split::Eval), speakers(Split::Test));
        assert!(tr.is_disjoint(&ev) && tr.is_disjoint(&te) && ev.is_disjoint(&te));
    }

    fn pooled_manifest() -> Manifest {
        let c = generate_synthetic(&SyntheticSpec { train: 200, speakers_per_split: [20, 2, 2], ..small() }).unwrap();
        c.manifest(Split::Train)
    }

    #[test]
    fn split_everything_into_train() {
        let m = pooled_manifest();
        let [tr, ev, te] = split_dataset(&m, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!((tr.len(), ev.len(), te.len()), (m.len(), 0, 0));
    }

    #[test]
    fn split_is_speaker_disjoint_and_reproducible() {
        let m = pooled_manifest();
        let a = split_dataset(&m, [0.8, 0.1, 0.1], 9).unwrap();
        let b = split_dataset(&m, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!(a, b);
        let sets: Vec<BTreeSet<String>> = a
            .iter()
            .map(|p| p.entries.iter().map(|e| e.speaker.clone().unwrap()).collect())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        assert_eq!(a.iter().map(Manifest::len).sum::<usize>(), m.len());
        assert_eq!(a[0].classes().unwrap(), m.classes().unwrap());
        assert!(split_dataset(&m, [0.5, 0.2, 0.2], 9).is_err());
    }
}
