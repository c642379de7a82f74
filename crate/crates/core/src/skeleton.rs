//! Skeleton sequence records: normalization, temporal block splitting, a
//! line-oriented JSONL interchange format, and a synthetic dataset whose
//! class signal lives only in third-order joint couplings.
//!
//! A sequence stores `F x J x C` coordinates (C is 2 or 3) plus a class
//! label. Records with two performing subjects carry a second skeleton with
//! identical dimensions; each skeleton is normalized and encoded separately
//! and the encoder outputs are averaged downstream.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub label: usize,
    /// `F x J x C` coordinates of the primary subject.
    pub joints: Tensor,
    /// Optional second subject with identical `F x J x C`.
    pub second_subject: Option<Tensor>,
    pub torso_index: usize,
}

impl SkeletonSequence {
    pub fn new(
        label: usize,
        joints: Tensor,
        second_subject: Option<Tensor>,
        torso_index: usize,
    ) -> Result<Self> {
        validate_skeleton(&joints)?;
        if let Some(s) = &second_subject {
            if s.shape() != joints.shape() {
                return Err(Error::ShapeMismatch(
                    "second subject dimensions differ from the first".into(),
                ));
            }
            validate_skeleton(s)?;
        }
        if torso_index >= joints.shape()[1] {
            return Err(Error::InvalidArgument(format!(
                "torso index {torso_index} out of range for {} joints",
                joints.shape()[1]
            )));
        }
        Ok(SkeletonSequence { label, joints, second_subject, torso_index })
    }

    pub fn frames(&self) -> usize {
        self.joints.shape()[0]
    }

    pub fn joint_count(&self) -> usize {
        self.joints.shape()[1]
    }

    pub fn coord_count(&self) -> usize {
        self.joints.shape()[2]
    }

    pub fn subject_count(&self) -> usize {
        if self.second_subject.is_some() { 2 } else { 1 }
    }

    pub fn subjects(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.joints).chain(self.second_subject.iter())
    }
}

fn validate_skeleton(t: &Tensor) -> Result<()> {
    if t.rank() != 3 {
        return Err(Error::ShapeMismatch("skeleton must be F x J x C".into()));
    }
    let (f, j, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if f < 1 || j < 2 || !(c == 2 || c == 3) {
        return Err(Error::InvalidArgument(format!(
            "bad skeleton dimensions F={f} J={j} C={c}"
        )));
    }
    if !t.all_finite() {
        return Err(Error::InvalidArgument("non-finite coordinate".into()));
    }
    Ok(())
}

fn map_subjects(seq: &SkeletonSequence, f: impl Fn(&Tensor) -> Tensor) -> SkeletonSequence {
    SkeletonSequence {
        label: seq.label,
        joints: f(&seq.joints),
        second_subject: seq.second_subject.as_ref().map(f),
        torso_index: seq.torso_index,
    }
}

/// Subtract the torso joint from every joint, per frame and per subject.
pub fn center_on_torso(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    let torso = seq.torso_index;
    if torso >= seq.joint_count() {
        return Err(Error::InvalidArgument(format!("torso index {torso} out of range")));
    }
    Ok(map_subjects(seq, |skel| {
        let (f, j, c) = (skel.shape()[0], skel.shape()[1], skel.shape()[2]);
        let mut data = skel.data().to_vec();
        for fr in 0..f {
            let torso_base = (fr * j + torso) * c;
            let torso_vals: Vec<f64> = data[torso_base..torso_base + c].to_vec();
            for jt in 0..j {
                let base = (fr * j + jt) * c;
                for ax in 0..c {
                    data[base + ax] -= torso_vals[ax];
                }
            }
        }
        Tensor::new(vec![f, j, c], data).expect("same shape")
    }))
}

/// Scale each axis by its max absolute value over all frames and joints so
/// coordinates land in [-1, 1]. An all-zero axis is left untouched.
pub fn normalize_unit_range(seq: &SkeletonSequence) -> SkeletonSequence {
    map_subjects(seq, |skel| {
        let (f, j, c) = (skel.shape()[0], skel.shape()[1], skel.shape()[2]);
        let mut max_abs = vec![0.0f64; c];
        for (pos, &v) in skel.data().iter().enumerate() {
            let ax = pos % c;
            if v.abs() > max_abs[ax] {
                max_abs[ax] = v.abs();
            }
        }
        let mut data = skel.data().to_vec();
        for (pos, v) in data.iter_mut().enumerate() {
            let ax = pos % c;
            if max_abs[ax] > 0.0 {
                *v /= max_abs[ax];
            }
        }
        Tensor::new(vec![f, j, c], data).expect("same shape")
    })
}

/// Torso centering followed by unit-range scaling.
pub fn normalize(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    Ok(normalize_unit_range(&center_on_torso(seq)?))
}

/// One skeleton cut into overlapping temporal blocks, each flattened to a
/// `J x (C*T)` matrix (frames major, coordinates fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedSequence {
    pub blocks: Vec<Tensor>,
    pub block_len: usize,
    pub stride: usize,
}

impl BlockedSequence {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// Closed-form block count: `floor((F - T)/S) + 1` when `F >= T`, else one
/// cyclically padded block.
pub fn block_count(frames: usize, block_len: usize, stride: usize) -> usize {
    if frames >= block_len {
        (frames - block_len) / stride + 1
    } else {
        1
    }
}

/// Split an `F x J x C` skeleton into temporal blocks of `block_len` frames
/// at the given stride. Trailing frames that cannot fill a block are
/// dropped; sequences shorter than one block are padded by cyclic frame
/// repetition.
pub fn split_blocks(skeleton: &Tensor, block_len: usize, stride: usize) -> Result<BlockedSequence> {
    if block_len < 1 || stride < 1 || stride > block_len {
        return Err(Error::InvalidArgument(format!(
            "block length {block_len} and stride {stride} must satisfy 1 <= S <= T"
        )));
    }
    validate_skeleton(skeleton)?;
    let (f, j, c) = (skeleton.shape()[0], skeleton.shape()[1], skeleton.shape()[2]);
    let tau = block_count(f, block_len, stride);
    let mut blocks = Vec::with_capacity(tau);
    for b in 0..tau {
        let mut data = vec![0.0; j * c * block_len];
        for k in 0..block_len {
            let frame = if f >= block_len { b * stride + k } else { k % f };
            for jt in 0..j {
                let src = (frame * j + jt) * c;
                let dst = jt * (c * block_len) + k * c;
                data[dst..dst + c].copy_from_slice(&skeleton.data()[src..src + c]);
            }
        }
        blocks.push(Tensor::new(vec![j, c * block_len], data)?);
    }
    Ok(BlockedSequence { blocks, block_len, stride })
}

// ── JSONL interchange ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Record {
    label: i64,
    joints: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subjects: Option<Vec<Vec<Vec<f64>>>>,
}

fn nested_from_tensor(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (f, j, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..f)
        .map(|fr| {
            (0..j)
                .map(|jt| {
                    let base = (fr * j + jt) * c;
                    t.data()[base..base + c].to_vec()
                })
                .collect()
        })
        .collect()
}

fn tensor_from_nested(nested: &[Vec<Vec<f64>>], line: usize) -> Result<Tensor> {
    let f = nested.len();
    if f == 0 {
        return Err(Error::Parse { line, msg: "record has no frames".into() });
    }
    let j = nested[0].len();
    if j < 2 {
        return Err(Error::Parse { line, msg: format!("need at least 2 joints, got {j}") });
    }
    let c = nested[0].first().map(|v| v.len()).unwrap_or(0);
    if !(c == 2 || c == 3) {
        return Err(Error::Parse { line, msg: format!("coordinates must be 2-D or 3-D, got {c}") });
    }
    let mut data = Vec::with_capacity(f * j * c);
    for (fi, frame) in nested.iter().enumerate() {
        if frame.len() != j {
            return Err(Error::Parse {
                line,
                msg: format!("frame {fi} has {} joints, expected {j}", frame.len()),
            });
        }
        for (ji, coords) in frame.iter().enumerate() {
            if coords.len() != c {
                return Err(Error::Parse {
                    line,
                    msg: format!("frame {fi} joint {ji} has {} coordinates, expected {c}", coords.len()),
                });
            }
            for &v in coords {
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("non-finite coordinate at frame {fi} joint {ji}"),
                    });
                }
                data.push(v);
            }
        }
    }
    Ok(Tensor::new(vec![f, j, c], data).expect("sizes agree"))
}

/// Write one JSON record per line. Floats use the shortest representation
/// that round-trips exactly.
pub fn save_jsonl(path: impl AsRef<Path>, dataset: &[SkeletonSequence]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for seq in dataset {
        let rec = Record {
            label: seq.label as i64,
            joints: nested_from_tensor(&seq.joints),
            subjects: seq.second_subject.as_ref().map(nested_from_tensor),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::InvalidArgument(format!("serialize: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a JSONL dataset. Malformed input is reported with its line number.
/// The torso joint is a loader parameter; the file format does not fix it.
pub fn load_jsonl(path: impl AsRef<Path>, torso_index: usize) -> Result<Vec<SkeletonSequence>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if rec.label < 0 {
            return Err(Error::Parse { line: line_no, msg: "negative label".into() });
        }
        let joints = tensor_from_nested(&rec.joints, line_no)?;
        let second = match &rec.subjects {
            Some(nested) => {
                let t = tensor_from_nested(nested, line_no)?;
                if t.shape() != joints.shape() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "second subject dimensions differ from the first".into(),
                    });
                }
                Some(t)
            }
            None => None,
        };
        out.push(
            SkeletonSequence::new(rec.label as usize, joints, second, torso_index)
                .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?,
        );
    }
    Ok(out)
}

// ── Synthetic benchmark data ────────────────────────────────────────────

/// Layout of the synthetic generator: which joint triples carry class bits
/// and the trajectory constants, exposed so tests can build coupling
/// features independently.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub joints: usize,
    /// Strictly increasing joint triples that carry class information.
    pub triples: Vec<[usize; 3]>,
    /// Number of class bits; triple `i` carries bit `i % bits`.
    pub bits: usize,
    /// Oscillation period in frames.
    pub period: usize,
    pub amplitude: f64,
    /// Linear amplitude growth over the sequence (fraction of amplitude).
    pub ramp: f64,
    pub coord_noise: f64,
    pub phase_jitter: f64,
}

impl SynthSpec {
    pub fn new(num_classes: usize, joints: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if joints < 6 {
            return Err(Error::InvalidArgument("need at least 6 joints".into()));
        }
        let bits = usize::BITS as usize - (num_classes - 1).leading_zeros() as usize;
        let triple_count = (joints - 1) / 3;
        if triple_count < bits {
            return Err(Error::InvalidArgument(format!(
                "{joints} joints give {triple_count} coupled triples, fewer than {bits} class bits"
            )));
        }
        let triples = (0..triple_count)
            .map(|i| [1 + 3 * i, 2 + 3 * i, 3 + 3 * i])
            .collect();
        Ok(SynthSpec {
            num_classes,
            joints,
            triples,
            bits,
            period: 5,
            amplitude: 0.6,
            ramp: 1.0,
            coord_noise: 0.01,
            phase_jitter: 0.04,
        })
    }

    /// Per-joint resting position, fixed across classes and sequences.
    /// Kept small relative to the oscillation so the motion, not the
    /// anchor, dominates each joint's block features.
    pub fn base_position(&self, joint: usize) -> [f64; 3] {
        if joint == 0 {
            return [0.0, 0.0, 0.0];
        }
        let a = joint as f64 * 2.399963229728653; // golden angle
        let r = 0.25;
        [r * a.cos(), r * a.sin(), 0.1 * ((joint % 3) as f64 - 1.0)]
    }

    /// Which coupled triple a joint belongs to, if any.
    pub fn triple_of(&self, joint: usize) -> Option<usize> {
        self.triples.iter().position(|t| t.contains(&joint))
    }

    /// Per-joint oscillation direction (unit vector). Members of a coupled
    /// triple swing along one shared axis, so their phase relationship is
    /// carried by a single spatial direction; triples and free joints get
    /// distinct axes.
    pub fn direction(&self, joint: usize) -> [f64; 3] {
        let group = match self.triple_of(joint) {
            Some(t) => t as f64,
            None => 50.0 + joint as f64,
        };
        let a = 1.7 + group * 1.2345;
        let b = 0.4 + group * 0.777;
        let v = [a.cos() * b.sin(), a.sin() * b.sin(), b.cos()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }

    /// Per-joint base phase: a shared carrier phase per coupled triple
    /// plus a small per-member offset (members stay individually
    /// distinguishable without burying the coupling).
    pub fn base_phase(&self, joint: usize) -> f64 {
        match self.triple_of(joint) {
            Some(t) => {
                let member = (joint - 1) % 3;
                t as f64 * 2.0399 + member as f64 * 0.15
            }
            None => joint as f64 * 0.9817477042468103,
        }
    }

    /// Which class bit a triple carries.
    pub fn triple_bit(&self, class: usize, triple_idx: usize) -> bool {
        (class >> (triple_idx % self.bits)) & 1 == 1
    }
}

/// Deterministic synthetic dataset. Every joint follows a sinusoid around a
/// fixed base position with a slow amplitude ramp; within each designated
/// triple the product of per-joint phase flips encodes one class bit, while
/// each individual flip (and hence every single-joint and pairwise
/// statistic) stays uniform across classes.
pub fn synth_dataset(
    num_classes: usize,
    seqs_per_class: usize,
    joints: usize,
    frames: usize,
    seed: u64,
) -> Result<Vec<SkeletonSequence>> {
    let spec = SynthSpec::new(num_classes, joints)?;
    if frames < 1 {
        return Err(Error::InvalidArgument("need at least one frame".into()));
    }
    let mut rng = Rng::new(seed).derive(0x5EED);
    let mut out = Vec::with_capacity(num_classes * seqs_per_class);
    for class in 0..num_classes {
        for _ in 0..seqs_per_class {
            out.push(synth_sequence(&spec, class, frames, &mut rng));
        }
    }
    Ok(out)
}

fn synth_sequence(
    spec: &SynthSpec,
    class: usize,
    frames: usize,
    rng: &mut Rng,
) -> SkeletonSequence {
    let j = spec.joints;
    // Phase flips: free joints draw uniformly; the last member of each
    // coupled triple closes the parity to the class bit.
    let mut flip = vec![false; j];
    let mut coupled = vec![false; j];
    for (ti, t) in spec.triples.iter().enumerate() {
        let (a, b, c) = (t[0], t[1], t[2]);
        flip[a] = rng.uniform() < 0.5;
        flip[b] = rng.uniform() < 0.5;
        flip[c] = spec.triple_bit(class, ti) ^ flip[a] ^ flip[b];
        coupled[a] = true;
        coupled[b] = true;
        coupled[c] = true;
    }
    for jt in 1..j {
        if !coupled[jt] {
            flip[jt] = rng.uniform() < 0.5;
        }
    }

    let jitter: Vec<f64> = (0..j)
        .map(|_| rng.uniform_in(-spec.phase_jitter, spec.phase_jitter))
        .collect();
    let omega = 2.0 * std::f64::consts::PI / spec.period as f64;
    let mut data = vec![0.0; frames * j * 3];
    for f in 0..frames {
        let progress = if frames > 1 { f as f64 / (frames - 1) as f64 } else { 0.0 };
        for jt in 0..j {
            let base = spec.base_position(jt);
            let dir = spec.direction(jt);
            let amp = if jt == 0 {
                0.0
            } else {
                spec.amplitude * (1.0 + spec.ramp * progress)
            };
            let phase = omega * f as f64
                + spec.base_phase(jt)
                + jitter[jt]
                + if flip[jt] { std::f64::consts::PI } else { 0.0 };
            let s = amp * phase.sin();
            let off = (f * j + jt) * 3;
            for ax in 0..3 {
                data[off + ax] = base[ax] + s * dir[ax] + rng.normal() * spec.coord_noise;
            }
        }
    }
    let joints_t = Tensor::new(vec![frames, j, 3], data).expect("sizes agree");
    SkeletonSequence { label: class, joints: joints_t, second_subject: None, torso_index: 0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sequence() -> SkeletonSequence {
        // Two frames, three joints, 3-D.
        let data = vec![
            1.0, 2.0, 3.0, /**/ 2.0, 2.0, 3.0, /**/ 1.0, 0.0, 5.0, //
            0.0, 1.0, 1.0, /**/ 4.0, 1.0, 0.0, /**/ 0.0, 3.0, 1.0,
        ];
        SkeletonSequence::new(
            7,
            Tensor::new(vec![2, 3, 3], data).unwrap(),
            None,
            0,
        )
        .unwrap()
    }

    #[test]
    fn centering_zeroes_torso_and_matches_hand_subtraction() {
        let seq = toy_sequence();
        let c = center_on_torso(&seq).unwrap();
        for f in 0..2 {
            for ax in 0..3 {
                assert_eq!(c.joints.get(&[f, 0, ax]), 0.0);
            }
        }
        // Hand subtraction for frame 1, joint 1: (4,1,0) - (0,1,1).
        assert_eq!(c.joints.get(&[1, 1, 0]), 4.0);
        assert_eq!(c.joints.get(&[1, 1, 1]), 0.0);
        assert_eq!(c.joints.get(&[1, 1, 2]), -1.0);
    }

    #[test]
    fn centering_is_translation_invariant() {
        let seq = toy_sequence();
        let shifted = SkeletonSequence::new(
            seq.label,
            seq.joints.map(|v| v + 11.25),
            None,
            0,
        )
        .unwrap();
        let a = center_on_torso(&seq).unwrap();
        let b = center_on_torso(&shifted).unwrap();
        assert!(a.joints.max_abs_diff(&b.joints) < 1e-12);
    }

    #[test]
    fn unit_range_scales_per_axis() {
        let data = vec![-2.0, 0.0, 1.0, 0.0];
        let seq = SkeletonSequence::new(
            0,
            Tensor::new(vec![1, 2, 2], data).unwrap(),
            None,
            0,
        )
        .unwrap();
        let n = normalize_unit_range(&seq);
        // Axis 0 values (-2, 1) scale by 1/2; axis 1 is all zero and stays.
        assert_eq!(n.joints.get(&[0, 0, 0]), -1.0);
        assert_eq!(n.joints.get(&[0, 1, 0]), 0.5);
        assert_eq!(n.joints.get(&[0, 0, 1]), 0.0);
        assert_eq!(n.joints.get(&[0, 1, 1]), 0.0);
    }

    #[test]
    fn unit_range_hits_one_on_random_data() {
        let data = synth_dataset(2, 3, 7, 20, 42).unwrap();
        for seq in &data {
            let n = normalize(seq).unwrap();
            let c = n.coord_count();
            let mut max_abs = vec![0.0f64; c];
            for (pos, &v) in n.joints.data().iter().enumerate() {
                assert!(v.abs() <= 1.0 + 1e-12);
                let ax = pos % c;
                max_abs[ax] = max_abs[ax].max(v.abs());
            }
            for &m in &max_abs {
                assert!((m - 1.0).abs() < 1e-12, "axis max {m}");
            }
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let data = synth_dataset(2, 2, 8, 17, 3).unwrap();
        for seq in &data {
            let once = normalize(seq).unwrap();
            let twice = normalize(&once).unwrap();
            assert!(once.joints.max_abs_diff(&twice.joints) < 1e-12);
        }
    }

    #[test]
    fn block_counts() {
        assert_eq!(block_count(20, 10, 5), 3);
        assert_eq!(block_count(10, 10, 5), 1);
        assert_eq!(block_count(7, 10, 5), 1);
        // Property over random shapes.
        let mut rng = Rng::new(77);
        for _ in 0..1000 {
            let t = 1 + rng.below(20);
            let s = 1 + rng.below(t);
            let f = 1 + rng.below(100);
            let skel = Tensor::zeros(&[f, 2, 2]);
            let blocked = split_blocks(&skel, t, s).unwrap();
            let expect = if f >= t { (f - t) / s + 1 } else { 1 };
            assert_eq!(blocked.block_count(), expect, "F={f} T={t} S={s}");
        }
    }

    #[test]
    fn short_sequences_pad_cyclically() {
        // F=7, T=10: block frames are 0..6,0,1,2 (cyclic).
        let skel = Tensor::from_fn(&[7, 2, 2], |i| i[0] as f64);
        let blocked = split_blocks(&skel, 10, 5).unwrap();
        assert_eq!(blocked.block_count(), 1);
        let block = &blocked.blocks[0];
        assert_eq!(block.shape(), &[2, 20]);
        let expect = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 1.0, 2.0];
        for (k, &e) in expect.iter().enumerate() {
            assert_eq!(block.get(&[0, 2 * k]), e);
        }
    }

    #[test]
    fn blocks_overlap_by_t_minus_s() {
        let skel = Tensor::from_fn(&[20, 2, 2], |i| (i[0] * 4 + i[1] * 2 + i[2]) as f64);
        let blocked = split_blocks(&skel, 10, 5).unwrap();
        assert_eq!(blocked.block_count(), 3);
        // Last 5 frames of block 0 equal first 5 frames of block 1.
        let b0 = &blocked.blocks[0];
        let b1 = &blocked.blocks[1];
        for jt in 0..2 {
            for k in 0..5 {
                for ax in 0..2 {
                    assert_eq!(
                        b0.get(&[jt, (5 + k) * 2 + ax]),
                        b1.get(&[jt, k * 2 + ax])
                    );
                }
            }
        }
    }

    #[test]
    fn split_rejects_bad_window() {
        let skel = Tensor::zeros(&[10, 2, 2]);
        assert!(split_blocks(&skel, 0, 1).is_err());
        assert!(split_blocks(&skel, 5, 0).is_err());
        assert!(split_blocks(&skel, 5, 6).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = std::env::temp_dir().join("hyperform_jsonl_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.jsonl");
        for seed in 0..5 {
            let data = synth_dataset(3, 4, 7, 11, seed).unwrap();
            save_jsonl(&path, &data).unwrap();
            let back = load_jsonl(&path, 0).unwrap();
            assert_eq!(back.len(), data.len());
            for (a, b) in data.iter().zip(&back) {
                assert_eq!(a.label, b.label);
                assert_eq!(a.joints, b.joints);
            }
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn jsonl_two_subject_round_trip() {
        let dir = std::env::temp_dir().join("hyperform_jsonl_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("two_subject.jsonl");
        let base = synth_dataset(2, 1, 6, 8, 9).unwrap();
        let two = SkeletonSequence::new(
            1,
            base[0].joints.clone(),
            Some(base[1].joints.clone()),
            0,
        )
        .unwrap();
        save_jsonl(&path, &[two.clone()]).unwrap();
        let back = load_jsonl(&path, 0).unwrap();
        assert_eq!(back[0], two);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn jsonl_empty_file_is_empty_dataset() {
        let dir = std::env::temp_dir().join("hyperform_jsonl_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path, 0).unwrap().is_empty());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn jsonl_ragged_record_names_the_line() {
        let dir = std::env::temp_dir().join("hyperform_jsonl_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ragged.jsonl");
        let good = r#"{"label":0,"joints":[[[0,0,0],[1,1,1]]]}"#;
        let ragged = r#"{"label":1,"joints":[[[0,0,0],[1,1]]]}"#;
        std::fs::write(&path, format!("{good}\n{ragged}\n")).unwrap();
        let err = load_jsonl(&path, 0).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(4, 5, 10, 40, 123).unwrap();
        let b = synth_dataset(4, 5, 10, 40, 123).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(4, 5, 10, 40, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_validates_arguments() {
        assert!(synth_dataset(1, 5, 10, 40, 0).is_err());
        assert!(synth_dataset(4, 5, 5, 40, 0).is_err());
        // 4 classes need 2 bits, hence at least 2 triples = 7 joints.
        assert!(synth_dataset(4, 5, 6, 40, 0).is_err());
        assert!(synth_dataset(2, 5, 6, 40, 0).is_ok());
    }

    #[test]
    fn per_joint_marginals_match_across_classes() {
        let k = 4;
        let data = synth_dataset(k, 60, 10, 40, 7).unwrap();
        let spec = SynthSpec::new(k, 10).unwrap();
        let _ = &spec;
        // Per class, per joint, per axis mean and variance of raw
        // coordinates. Classes must agree within 0.05.
        let mut stats = vec![[[0.0f64; 2]; 30]; k]; // [class][joint*3+ax][mean, m2]
        let mut counts = vec![0usize; k];
        for seq in &data {
            counts[seq.label] += 1;
        }
        for seq in &data {
            let f = seq.frames();
            for fr in 0..f {
                for jt in 0..10 {
                    for ax in 0..3 {
                        let v = seq.joints.get(&[fr, jt, ax]);
                        let slot = &mut stats[seq.label][jt * 3 + ax];
                        slot[0] += v;
                        slot[1] += v * v;
                    }
                }
            }
        }
        let frames = 40.0;
        for cls in 0..k {
            let n = counts[cls] as f64 * frames;
            for s in stats[cls].iter_mut() {
                s[0] /= n;
                s[1] = s[1] / n - s[0] * s[0];
            }
        }
        for a in 0..k {
            for b in a + 1..k {
                for d in 0..30 {
                    assert!(
                        (stats[a][d][0] - stats[b][d][0]).abs() < 0.05,
                        "mean drift joint-axis {d}: {} vs {}",
                        stats[a][d][0],
                        stats[b][d][0]
                    );
                    assert!(
                        (stats[a][d][1] - stats[b][d][1]).abs() < 0.05,
                        "variance drift joint-axis {d}"
                    );
                }
            }
        }
    }

    /// Estimate the phase flip of one joint by correlating its displacement
    /// along the oscillation direction with the clean carrier sinusoid.
    fn flip_estimate(spec: &SynthSpec, seq: &SkeletonSequence, joint: usize) -> f64 {
        let omega = 2.0 * std::f64::consts::PI / spec.period as f64;
        let dir = spec.direction(joint);
        let base = spec.base_position(joint);
        let mut acc = 0.0;
        for f in 0..seq.frames() {
            let mut along = 0.0;
            for ax in 0..3 {
                along += (seq.joints.get(&[f, joint, ax]) - base[ax]) * dir[ax];
            }
            acc += along * (omega * f as f64 + spec.base_phase(joint)).sin();
        }
        if acc >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Tiny multinomial logistic regression by gradient descent; returns
    /// accuracy on the evaluation split.
    fn logreg_accuracy(
        train: &[(Vec<f64>, usize)],
        eval: &[(Vec<f64>, usize)],
        classes: usize,
        steps: usize,
        lr: f64,
    ) -> f64 {
        let dim = train[0].0.len();
        let mut w = vec![0.0f64; classes * (dim + 1)];
        for _ in 0..steps {
            let mut grad = vec![0.0f64; classes * (dim + 1)];
            for (x, y) in train {
                let mut logits = vec![0.0f64; classes];
                for (c, l) in logits.iter_mut().enumerate() {
                    let row = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
                    *l = row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
                let mut probs = vec![0.0f64; classes];
                crate::tensor::tape::softmax_into(&logits, &mut probs);
                for c in 0..classes {
                    let err = probs[c] - if c == *y { 1.0 } else { 0.0 };
                    let row = &mut grad[c * (dim + 1)..(c + 1) * (dim + 1)];
                    for (g, &xv) in row[..dim].iter_mut().zip(x) {
                        *g += err * xv;
                    }
                    row[dim] += err;
                }
            }
            let scale = lr / train.len() as f64;
            for (wv, gv) in w.iter_mut().zip(&grad) {
                *wv -= scale * gv + 1e-4 * *wv;
            }
        }
        let mut hits = 0usize;
        for (x, y) in eval {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for c in 0..classes {
                let row = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
                let s = row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                if s > best {
                    best = s;
                    arg = c;
                }
            }
            if arg == *y {
                hits += 1;
            }
        }
        hits as f64 / eval.len() as f64
    }

    #[test]
    fn only_triple_couplings_separate_classes() {
        let k = 4;
        let spec = SynthSpec::new(k, 10).unwrap();
        let data = synth_dataset(k, 50, 10, 40, 11).unwrap();
        let mut per_joint: Vec<(Vec<f64>, usize)> = Vec::new();
        let mut coupling: Vec<(Vec<f64>, usize)> = Vec::new();
        for seq in &data {
            let flips: Vec<f64> = (0..10).map(|j| flip_estimate(&spec, seq, j)).collect();
            per_joint.push((flips.clone(), seq.label));
            let feats: Vec<f64> = spec
                .triples
                .iter()
                .map(|t| flips[t[0]] * flips[t[1]] * flips[t[2]])
                .collect();
            coupling.push((feats, seq.label));
        }
        // Interleave an 80/20 split (the generator emits classes in order).
        let split = |items: &[(Vec<f64>, usize)]| {
            let mut train = Vec::new();
            let mut eval = Vec::new();
            for (i, it) in items.iter().enumerate() {
                if i % 5 == 4 {
                    eval.push(it.clone());
                } else {
                    train.push(it.clone());
                }
            }
            (train, eval)
        };
        let (tr, ev) = split(&per_joint);
        let acc_single = logreg_accuracy(&tr, &ev, k, 300, 0.5);
        let (tr, ev) = split(&coupling);
        let acc_triple = logreg_accuracy(&tr, &ev, k, 300, 0.5);
        assert!(
            acc_single <= 1.0 / k as f64 + 0.1,
            "per-joint features should sit at chance, got {acc_single}"
        );
        assert!(
            acc_triple >= 0.9,
            "triple couplings should separate classes, got {acc_triple}"
        );
    }
}
