//! Corpora of clip features: synthetic generation and JSON Lines persistence.
//!
//! One video per line: `{"id": str, "label": int, "clips": [[f64, ...], ...]}`.
//! A label of `-1` marks an unlabeled video. Floats are written in shortest
//! round-trip form, so every value reads back bit-identically.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{all_finite, normal_vector, Rng};

pub const UNLABELED: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub id: String,
    pub label: i64,
    pub clips: Vec<Vec<f64>>,
}

/// Videos in file order. All clips share one feature dimension and every
/// video carries the same number of clips.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub videos: Vec<Video>,
}

impl Corpus {
    pub fn new(videos: Vec<Video>) -> Result<Self> {
        let corpus = Self { videos };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// `None` for an empty corpus.
    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.clips[0].len())
    }

    pub fn clips_per_video(&self) -> Option<usize> {
        self.videos.first().map(|v| v.clips.len())
    }

    pub fn labels(&self) -> Vec<i64> {
        self.videos.iter().map(|v| v.label).collect()
    }

    /// True when every video carries a class label.
    pub fn is_labeled(&self) -> bool {
        !self.videos.is_empty() && self.videos.iter().all(|v| v.label != UNLABELED)
    }

    pub fn num_classes(&self) -> usize {
        let set: HashSet<i64> = self.videos.iter().map(|v| v.label).filter(|&l| l >= 0).collect();
        set.len()
    }

    fn validate(&self) -> Result<()> {
        let mut shape = None;
        let mut ids = HashSet::new();
        for (idx, v) in self.videos.iter().enumerate() {
            check_video(v, &mut shape, &mut ids).map_err(|msg| Error::Corpus { line: idx + 1, msg })?;
        }
        Ok(())
    }

    /// Rejects the corpus unless every video has at least `n` clips.
    pub fn require_clips(&self, n: usize) -> Result<()> {
        if let Some(have) = self.clips_per_video() {
            if have < n {
                return Err(Error::InvalidConfig(format!(
                    "videos carry {have} clips but training samples N = {n}"
                )));
            }
        }
        Ok(())
    }

    /// Stratified split: within each class, the last `ceil(frac * count)`
    /// videos (in corpus order) go to the second corpus.
    pub fn split(&self, test_fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidConfig(format!(
                "test fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        let mut per_class: Vec<(i64, Vec<usize>)> = Vec::new();
        for (i, v) in self.videos.iter().enumerate() {
            match per_class.iter_mut().find(|(l, _)| *l == v.label) {
                Some((_, idx)) => idx.push(i),
                None => per_class.push((v.label, vec![i])),
            }
        }
        let mut is_test = vec![false; self.len()];
        for (_, idx) in &per_class {
            let n_test = (test_fraction * idx.len() as f64).ceil() as usize;
            for &i in &idx[idx.len() - n_test..] {
                is_test[i] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (v, t) in self.videos.iter().zip(is_test) {
            if t {
                test.push(v.clone());
            } else {
                train.push(v.clone());
            }
        }
        Ok((Corpus { videos: train }, Corpus { videos: test }))
    }
}

fn check_video(
    v: &Video,
    shape: &mut Option<(usize, usize)>,
    ids: &mut HashSet<String>,
) -> std::result::Result<(), String> {
    if v.label < UNLABELED {
        return Err(format!("label {} is below -1", v.label));
    }
    if v.clips.is_empty() {
        return Err(format!("video '{}' has no clips", v.id));
    }
    let f = v.clips[0].len();
    if f == 0 {
        return Err(format!("video '{}' has an empty clip", v.id));
    }
    if let Some(c) = v.clips.iter().find(|c| c.len() != f) {
        return Err(format!(
            "video '{}' has ragged clips of lengths {f} and {}",
            v.id,
            c.len()
        ));
    }
    if v.clips.iter().any(|c| !all_finite(c)) {
        return Err(format!("video '{}' contains a non-finite value", v.id));
    }
    match *shape {
        None => *shape = Some((f, v.clips.len())),
        Some((f0, n0)) => {
            if f != f0 {
                return Err(format!("feature dimension {f} differs from corpus dimension {f0}"));
            }
            if v.clips.len() != n0 {
                return Err(format!(
                    "video '{}' has {} clips, corpus has {n0} per video",
                    v.id,
                    v.clips.len()
                ));
            }
        }
    }
    if !ids.insert(v.id.clone()) {
        return Err(format!("duplicate id '{}'", v.id));
    }
    Ok(())
}

/// Streams a JSON Lines corpus. Blank lines are skipped; line numbers in
/// errors are 1-based physical lines.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut videos = Vec::new();
    let mut shape = None;
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let video: Video = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            line: lineno,
            msg: e.to_string(),
        })?;
        check_video(&video, &mut shape, &mut ids).map_err(|msg| Error::Corpus { line: lineno, msg })?;
        videos.push(video);
    }
    Ok(Corpus { videos })
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    write_atomic(path, |w| {
        for v in &corpus.videos {
            serde_json::to_writer(&mut *w, v)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub videos_per_class: usize,
    pub clips: usize,
    pub feature_dim: usize,
    /// Distance of each class center from the origin, in units of
    /// `within_std`.
    pub separation: f64,
    pub within_std: f64,
    pub clip_noise_std: f64,
    /// Per-video clip noise is scaled by `exp(spread * U)` with
    /// `U ~ Uniform(-1, 1)`. Zero gives homogeneous videos.
    pub noise_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            videos_per_class: 40,
            clips: 2,
            feature_dim: 64,
            separation: 6.0,
            within_std: 1.0,
            clip_noise_std: 0.5,
            noise_spread: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.classes == 0 || self.videos_per_class == 0 || self.clips == 0 || self.feature_dim == 0 {
            return bad("classes, videos_per_class, clips and feature_dim must be >= 1".into());
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("separation must be >= 0, got {}", self.separation));
        }
        if !(self.within_std > 0.0 && self.within_std.is_finite()) {
            return bad(format!("within_std must be > 0, got {}", self.within_std));
        }
        if !(self.clip_noise_std > 0.0 && self.clip_noise_std.is_finite()) {
            return bad(format!("clip_noise_std must be > 0, got {}", self.clip_noise_std));
        }
        if !(self.noise_spread >= 0.0 && self.noise_spread.is_finite()) {
            return bad(format!("noise_spread must be >= 0, got {}", self.noise_spread));
        }
        Ok(())
    }
}

/// Uniformly random unit direction scaled to `radius`. A zero radius yields
/// the origin.
fn sphere_point(rng: &mut Rng, dim: usize, radius: f64) -> Result<Vec<f64>> {
    let mut v = normal_vector(rng, dim)?;
    let n = crate::numerics::norm(&v);
    for x in &mut v {
        *x *= radius / n;
    }
    Ok(v)
}

/// Class-major corpus with ids `v00000`, `v00001`, ...
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let radius = spec.separation * spec.within_std;
    let centers = (0..spec.classes)
        .map(|_| sphere_point(&mut rng, spec.feature_dim, radius))
        .collect::<Result<Vec<_>>>()?;
    let mut videos = Vec::with_capacity(spec.classes * spec.videos_per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..spec.videos_per_class {
            let latent: Vec<f64> = center
                .iter()
                .map(|c| c + spec.within_std * rng.normal())
                .collect();
            let scale = if spec.noise_spread > 0.0 {
                spec.clip_noise_std * (spec.noise_spread * (2.0 * rng.uniform() - 1.0)).exp()
            } else {
                spec.clip_noise_std
            };
            let clips = (0..spec.clips)
                .map(|_| latent.iter().map(|l| l + scale * rng.normal()).collect())
                .collect();
            videos.push(Video {
                id: format!("v{:05}", videos.len()),
                label: label as i64,
                clips,
            });
        }
    }
    Ok(Corpus { videos })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            videos_per_class: 4,
            clips: 2,
            feature_dim: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut c = generate_synthetic(&tiny()).unwrap();
        c.videos[0].clips[0][0] = 0.1 + 0.2;
        c.videos[0].clips[0][1] = f64::MIN_POSITIVE;
        c.videos[0].clips[0][2] = -1.234_567_890_123_456_7e300;
        write_corpus(&c, &path).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), c);
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_corpus(&generate_synthetic(&tiny()).unwrap(), &a).unwrap();
        write_corpus(&generate_synthetic(&tiny()).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    fn read_str(text: &str) -> Result<Corpus> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, text).unwrap();
        read_corpus(&path)
    }

    #[test]
    fn ragged_clip_names_line() {
        let good = r#"{"id":"a","label":0,"clips":[[1,2,3,4,5,6,7,8],[1,2,3,4,5,6,7,8]]}"#;
        let bad = r#"{"id":"b","label":0,"clips":[[1,2,3,4,5,6,7,8],[1,2,3,4,5,6,7,8,9]]}"#;
        match read_str(&format!("{good}\n{bad}\n")) {
            Err(Error::Corpus { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("8") && msg.contains("9"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_overflow_rejected() {
        let v = r#"{"id":"a","label":0,"clips":[[1.0]]}"#;
        assert!(matches!(read_str(&format!("{v}\n{v}\n")), Err(Error::Corpus { line: 2, .. })));
        let inf = r#"{"id":"a","label":0,"clips":[[1e999]]}"#;
        assert!(matches!(read_str(inf), Err(Error::Corpus { line: 1, .. })));
        let nan = r#"{"id":"a","label":0,"clips":[[NaN]]}"#;
        assert!(matches!(read_str(nan), Err(Error::Corpus { line: 1, .. })));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let c = read_str("").unwrap();
        assert!(c.is_empty());
        assert_eq!(c.feature_dim(), None);
    }

    #[test]
    fn clip_count_must_match_corpus() {
        let a = r#"{"id":"a","label":0,"clips":[[1.0],[2.0]]}"#;
        let b = r#"{"id":"b","label":0,"clips":[[1.0]]}"#;
        assert!(matches!(read_str(&format!("{a}\n{b}")), Err(Error::Corpus { line: 2, .. })));
        let c = read_str(a).unwrap();
        assert!(c.require_clips(2).is_ok());
        assert!(c.require_clips(3).is_err());
    }

    #[test]
    fn wide_separation_is_nearest_center_separable() {
        let spec = SyntheticSpec {
            classes: 4,
            videos_per_class: 50,
            feature_dim: 32,
            separation: 10.0,
            within_std: 1.0,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        // recover the centers with the same stream
        let mut rng = Rng::new(spec.seed);
        let centers: Vec<Vec<f64>> = (0..4).map(|_| sphere_point(&mut rng, 32, 10.0).unwrap()).collect();
        for v in &corpus.videos {
            let clip_mean: Vec<f64> = (0..32).map(|k| 0.5 * (v.clips[0][k] + v.clips[1][k])).collect();
            let best = (0..4)
                .min_by(|&a, &b| {
                    crate::numerics::sq_dist(&clip_mean, &centers[a])
                        .total_cmp(&crate::numerics::sq_dist(&clip_mean, &centers[b]))
                })
                .unwrap();
            assert_eq!(best as i64, v.label);
        }
    }

    #[test]
    fn zero_separation_centers_coincide() {
        let spec = SyntheticSpec {
            separation: 0.0,
            ..tiny()
        };
        let mut rng = Rng::new(spec.seed);
        let c = sphere_point(&mut rng, 5, 0.0).unwrap();
        assert!(c.iter().all(|&x| x == 0.0));
        assert!(generate_synthetic(&spec).is_ok());
        assert!(generate_synthetic(&SyntheticSpec { separation: -1.0, ..tiny() }).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let c = generate_synthetic(&tiny()).unwrap();
        let (train, test) = c.split(0.25).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 3);
        assert_eq!(test.num_classes(), 3);
    }
}
