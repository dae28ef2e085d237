//! Deterministic clean/degraded image pairs.
//!
//! Scenes are procedural (gradients, rectangles, sinusoidal texture). Haze
//! follows the atmospheric scattering model `I = J·t + A·(1 − t)` with
//! `t = exp(−β·d)` over a linear depth ramp; rain and snow are seeded
//! alpha-blended overlays whose pixel coverage scales with severity.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub const HAZE_AIRLIGHT: f64 = 0.9;
pub const HAZE_BETA_PER_SEVERITY: f64 = 3.0;
/// Target overlay coverage at severity 1 for rain and snow.
pub const OVERLAY_COVERAGE_PER_SEVERITY: f64 = 0.15;
const RAIN_BRIGHTNESS: f64 = 0.95;
const SNOW_BRIGHTNESS: f64 = 0.97;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Weather {
    Rain,
    Snow,
    Haze,
    Mixed,
}

impl Weather {
    pub const ALL: [Weather; 4] = [Weather::Rain, Weather::Snow, Weather::Haze, Weather::Mixed];

    /// Position in the one-hot prior block.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Weather::Rain => "rain",
            Weather::Snow => "snow",
            Weather::Haze => "haze",
            Weather::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Weather {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Weather {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Weather::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::invalid("weather", format!("unknown weather {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub weather: Weather,
    pub severity: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(weather: Weather, severity: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            weather,
            severity,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::invalid("severity", format!("{} outside [0, 1]", self.severity)));
        }
        Ok(())
    }

    fn expect(&self, op: &str, allowed: &[Weather]) -> Result<()> {
        self.validate()?;
        if !allowed.contains(&self.weather) {
            return Err(Error::invalid(
                "weather",
                format!("{op} does not apply to {}", self.weather),
            ));
        }
        Ok(())
    }
}

fn check_image(img: &Tensor<f64>, op: &'static str) -> Result<(usize, usize)> {
    let (h, w, c) = img.dims3(op)?;
    if c != 3 {
        return Err(Error::shape(op, img.shape(), &[h, w, 3]));
    }
    Ok((h, w))
}

/// Procedural scene with values in `[0, 1]`.
pub fn gen_clean(seed: u64, height: usize, width: usize) -> Result<Tensor<f64>> {
    if height < 8 || width < 8 {
        return Err(Error::invalid("image size", format!("{height}x{width} is below 8x8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners: [[f64; 3]; 4] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.1..0.9)));

    struct Rect {
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
        color: [f64; 3],
        alpha: f64,
    }
    let rects: Vec<Rect> = (0..rng.random_range(3..7))
        .map(|_| {
            let rh = rng.random_range(height / 8..=height / 2).max(1);
            let rw = rng.random_range(width / 8..=width / 2).max(1);
            let y0 = rng.random_range(0..height - rh + 1);
            let x0 = rng.random_range(0..width - rw + 1);
            Rect {
                y0,
                y1: y0 + rh,
                x0,
                x1: x0 + rw,
                color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                alpha: rng.random_range(0.8..1.0),
            }
        })
        .collect();
    let freq = rng.random_range(2.0..8.0) * std::f64::consts::TAU;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amplitude = 0.08;

    let mut img = Tensor::zeros(&[height, width, 3]);
    let data = img.data_mut();
    for y in 0..height {
        let v = y as f64 / (height - 1) as f64;
        for x in 0..width {
            let u = x as f64 / (width - 1) as f64;
            let wave = amplitude * (freq * (u * angle.cos() + v * angle.sin()) + phase).sin();
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                *p = top * (1.0 - v) + bottom * v;
            }
            for r in rects
                .iter()
                .filter(|r| (r.y0..r.y1).contains(&y) && (r.x0..r.x1).contains(&x))
            {
                for (p, &col) in px.iter_mut().zip(&r.color) {
                    *p = *p * (1.0 - r.alpha) + col * r.alpha;
                }
            }
            let base = (y * width + x) * 3;
            for c in 0..3 {
                data[base + c] = (px[c] + wave).clamp(0.0, 1.0);
            }
        }
    }
    Ok(img)
}

/// Linear depth ramp: 1 at the top row (far), 0 at the bottom row (near).
pub fn depth_at(row: usize, height: usize) -> f64 {
    if height <= 1 {
        return 0.0;
    }
    1.0 - row as f64 / (height - 1) as f64
}

pub fn apply_haze(img: &Tensor<f64>, spec: &DegradationSpec) -> Result<Tensor<f64>> {
    spec.expect("apply_haze", &[Weather::Haze, Weather::Mixed])?;
    let (h, w) = check_image(img, "apply_haze")?;
    let beta = HAZE_BETA_PER_SEVERITY * spec.severity;
    let mut out = img.clone();
    for (y, row) in out.data_mut().chunks_exact_mut(w * 3).enumerate().take(h) {
        let t = (-beta * depth_at(y, h)).exp();
        for v in row.iter_mut() {
            *v = *v * t + HAZE_AIRLIGHT * (1.0 - t);
        }
    }
    Ok(out)
}

/// Per-pixel blend weights of an overlay; zero where untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlayMask {
    pub height: usize,
    pub width: usize,
    pub alpha: Vec<f64>,
}

impl OverlayMask {
    fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            alpha: vec![0.0; height * width],
        }
    }

    fn stamp(&mut self, y: isize, x: isize, a: f64) {
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            return;
        }
        let i = y as usize * self.width + x as usize;
        self.alpha[i] = self.alpha[i].max(a);
    }

    pub fn coverage(&self) -> f64 {
        self.alpha.iter().filter(|&&a| a > 0.0).count() as f64 / self.alpha.len() as f64
    }

    fn blend(&self, img: &Tensor<f64>, brightness: f64) -> Tensor<f64> {
        let mut out = img.clone();
        for (px, &a) in out.data_mut().chunks_exact_mut(3).zip(&self.alpha) {
            if a > 0.0 {
                for v in px.iter_mut() {
                    *v = *v * (1.0 - a) + brightness * a;
                }
            }
        }
        out
    }
}

fn overlay_rng(spec: &DegradationSpec, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed ^ salt)
}

/// Rain streaks: fixed angle per seed, length proportional to severity.
///
/// Streak `i` draws the same random values at every severity, so the mask at a
/// higher severity covers the mask at a lower one.
pub fn rain_mask(spec: &DegradationSpec, height: usize, width: usize) -> OverlayMask {
    let mut mask = OverlayMask::new(height, width);
    let mut rng = overlay_rng(spec, 0x5241_494e);
    let angle = rng.random_range(-25f64..25.0).to_radians();
    let length = ((height as f64) * (0.08 + 0.25 * spec.severity)).round().max(2.0);
    let target = OVERLAY_COVERAGE_PER_SEVERITY * spec.severity * (height * width) as f64;
    let count = (target / length).round() as usize;
    let (dx, dy) = (angle.sin(), angle.cos());
    for _ in 0..count {
        let y0 = rng.random_range(0.0..height as f64);
        let x0 = rng.random_range(0.0..width as f64);
        let alpha = rng.random_range(0.5..0.85);
        for s in 0..length as usize {
            let s = s as f64;
            mask.stamp((y0 + s * dy).floor() as isize, (x0 + s * dx).floor() as isize, alpha);
        }
    }
    mask
}

/// Snow: elliptical flecks whose radii grow with severity.
pub fn snow_mask(spec: &DegradationSpec, height: usize, width: usize) -> OverlayMask {
    let mut mask = OverlayMask::new(height, width);
    let mut rng = overlay_rng(spec, 0x534e_4f57);
    let radius = 1.0 + 2.0 * spec.severity;
    let mean_area = std::f64::consts::PI * (0.8 * radius) * (0.8 * radius);
    let target = OVERLAY_COVERAGE_PER_SEVERITY * spec.severity * (height * width) as f64;
    let count = (target / mean_area).round() as usize;
    for _ in 0..count {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = radius * rng.random_range(0.6..1.0);
        let rx = radius * rng.random_range(0.6..1.0);
        let alpha = rng.random_range(0.6..0.95);
        let (y_lo, y_hi) = ((cy - ry).floor() as isize, (cy + ry).ceil() as isize);
        let (x_lo, x_hi) = ((cx - rx).floor() as isize, (cx + rx).ceil() as isize);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let ny = (y as f64 + 0.5 - cy) / ry;
                let nx = (x as f64 + 0.5 - cx) / rx;
                if ny * ny + nx * nx <= 1.0 {
                    mask.stamp(y, x, alpha);
                }
            }
        }
    }
    mask
}

pub fn apply_rain(img: &Tensor<f64>, spec: &DegradationSpec) -> Result<Tensor<f64>> {
    spec.expect("apply_rain", &[Weather::Rain, Weather::Mixed])?;
    let (h, w) = check_image(img, "apply_rain")?;
    Ok(rain_mask(spec, h, w).blend(img, RAIN_BRIGHTNESS))
}

pub fn apply_snow(img: &Tensor<f64>, spec: &DegradationSpec) -> Result<Tensor<f64>> {
    spec.expect("apply_snow", &[Weather::Snow])?;
    let (h, w) = check_image(img, "apply_snow")?;
    Ok(snow_mask(spec, h, w).blend(img, SNOW_BRIGHTNESS))
}

/// Applies the degradation named by `spec`; mixed weather is haze, then rain.
pub fn degrade(img: &Tensor<f64>, spec: &DegradationSpec) -> Result<Tensor<f64>> {
    match spec.weather {
        Weather::Rain => apply_rain(img, spec),
        Weather::Snow => apply_snow(img, spec),
        Weather::Haze => apply_haze(img, spec),
        Weather::Mixed => apply_rain(&apply_haze(img, spec)?, spec),
    }
}

/// Sampling weights over weather types.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherMix {
    weights: Vec<(Weather, f64)>,
}

impl WeatherMix {
    pub fn new(weights: Vec<(Weather, f64)>) -> Result<Self> {
        if weights.iter().any(|&(_, p)| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::invalid("weather mix", "weights must be finite and non-negative"));
        }
        if weights.iter().map(|&(_, p)| p).sum::<f64>() <= 0.0 {
            return Err(Error::invalid("weather mix", "empty distribution"));
        }
        Ok(Self { weights })
    }

    pub fn uniform() -> Self {
        Self {
            weights: Weather::ALL.iter().map(|&w| (w, 1.0)).collect(),
        }
    }

    pub fn only(weather: Weather) -> Self {
        Self {
            weights: vec![(weather, 1.0)],
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Weather {
        let total: f64 = self.weights.iter().map(|&(_, p)| p).sum();
        let mut pick = rng.random_range(0.0..total);
        for &(w, p) in &self.weights {
            if pick < p {
                return w;
            }
            pick -= p;
        }
        self.weights.iter().rev().find(|&&(_, p)| p > 0.0).expect("non-empty").0
    }
}

impl FromStr for WeatherMix {
    type Err = Error;

    /// `uniform`, or comma-separated `weather[:weight]` entries.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "uniform" {
            return Ok(Self::uniform());
        }
        let weights = s
            .split(',')
            .filter(|part| !part.trim().is_empty())
            .map(|part| {
                let (name, weight) = part.split_once(':').unwrap_or((part, "1"));
                let weight = weight
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid("weather mix", format!("bad weight in {part:?}")))?;
                Ok((name.trim().parse()?, weight))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights)
    }
}

impl fmt::Display for WeatherMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.weights.iter().map(|(w, p)| format!("{w}:{p}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clean: Tensor<f64>,
    pub degraded: Tensor<f64>,
    pub spec: DegradationSpec,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Parameters of [`make_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub mix: WeatherMix,
    pub height: usize,
    pub width: usize,
    /// Severities are drawn uniformly from this closed range.
    pub severity: (f64, f64),
    pub seed: u64,
}

pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.count == 0 {
        return Err(Error::invalid("dataset size", "need at least one sample"));
    }
    let (lo, hi) = spec.severity;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::invalid("severity range", format!("[{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samples = (0..spec.count)
        .map(|_| {
            let seed = rng.next_u64();
            let weather = spec.mix.sample(&mut rng);
            let severity = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            let deg = DegradationSpec::new(weather, severity, seed)?;
            let clean = gen_clean(seed, spec.height, spec.width)?;
            let degraded = degrade(&clean, &deg)?;
            Ok(Sample {
                clean,
                degraded,
                spec: deg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

pub const MANIFEST_HEADER: &str = "index,seed,weather,severity";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn manifest(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", s.spec.seed, s.spec.weather, s.spec.severity));
        }
        out
    }

    /// Writes `clean_%05d.ppm`, `deg_%05d.ppm` and `manifest.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            io::write_ppm(dir.join(format!("clean_{i:05}.ppm")), &s.clean)?;
            io::write_ppm(dir.join(format!("deg_{i:05}.ppm")), &s.degraded)?;
        }
        let path = dir.join("manifest.csv");
        std::fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory produced by [`Dataset::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let specs = parse_manifest(
            &std::fs::read_to_string(dir.join("manifest.csv")).map_err(|e| Error::io(dir.join("manifest.csv"), e))?,
        )?;
        let samples = specs
            .into_iter()
            .map(|(i, spec)| {
                Ok(Sample {
                    clean: io::read_ppm(dir.join(format!("clean_{i:05}.ppm")))?,
                    degraded: io::read_ppm(dir.join(format!("deg_{i:05}.ppm")))?,
                    spec,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<(usize, DegradationSpec)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::format(
            "manifest header",
            format!("expected {MANIFEST_HEADER:?}"),
        ));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::format("manifest row", line.to_string());
            let [index, seed, weather, severity] = cols.as_slice() else {
                return Err(bad());
            };
            let spec = DegradationSpec::new(
                weather.parse()?,
                severity.parse().map_err(|_| bad())?,
                seed.parse().map_err(|_| bad())?,
            )?;
            Ok((index.parse().map_err(|_| bad())?, spec))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn spec(weather: Weather, severity: f64, seed: u64) -> DegradationSpec {
        DegradationSpec::new(weather, severity, seed).unwrap()
    }

    fn std_dev(img: &Tensor<f64>) -> f64 {
        let mean = img.mean();
        (img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.len() as f64).sqrt()
    }

    #[test]
    fn clean_images_are_deterministic_bounded_and_textured() {
        assert_eq!(gen_clean(5, 32, 48).unwrap(), gen_clean(5, 32, 48).unwrap());
        for seed in 0..50 {
            let img = gen_clean(seed, 64, 64).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(std_dev(&img) >= 0.05, "seed {seed}: {}", std_dev(&img));
        }
        assert!(gen_clean(1, 7, 32).is_err());
    }

    #[test]
    fn different_seeds_differ_in_many_pixels() {
        let a = gen_clean(1, 64, 64).unwrap();
        let b = gen_clean(2, 64, 64).unwrap();
        let differing = a
            .data()
            .chunks(3)
            .zip(b.data().chunks(3))
            .filter(|(p, q)| p != q)
            .count();
        assert!(differing as f64 >= 0.1 * 64.0 * 64.0);
    }

    #[test]
    fn zero_severity_is_identity_for_every_weather() {
        let img = gen_clean(3, 32, 32).unwrap();
        for w in Weather::ALL {
            assert_eq!(degrade(&img, &spec(w, 0.0, 11)).unwrap(), img, "{w}");
        }
    }

    #[test]
    fn haze_matches_pixelwise_formula() {
        let img = gen_clean(4, 16, 20).unwrap();
        let s = spec(Weather::Haze, 0.45, 1);
        let out = apply_haze(&img, &s).unwrap();
        let beta = 3.0 * 0.45;
        for y in 0..16 {
            let d = 1.0 - y as f64 / 15.0;
            let t = (-beta * d).exp();
            for x in 0..20 {
                for c in 0..3 {
                    let i = (y * 20 + x) * 3 + c;
                    let expected = img.data()[i] * t + 0.9 * (1.0 - t);
                    assert!((out.data()[i] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dense_haze_far_row_approaches_airlight() {
        let img = gen_clean(8, 16, 16).unwrap();
        let out = apply_haze(&img, &spec(Weather::Haze, 1.0, 0)).unwrap();
        let bound = (-3f64).exp();
        assert!(out.data()[..16 * 3].iter().all(|v| (v - 0.9).abs() <= bound));
    }

    #[test]
    fn wrong_weather_is_rejected() {
        let img = gen_clean(1, 16, 16).unwrap();
        assert!(apply_haze(&img, &spec(Weather::Rain, 0.5, 1)).is_err());
        assert!(apply_rain(&img, &spec(Weather::Snow, 0.5, 1)).is_err());
        assert!(apply_snow(&img, &spec(Weather::Haze, 0.5, 1)).is_err());
        assert!(DegradationSpec::new(Weather::Rain, 1.5, 0).is_err());
    }

    #[test]
    fn overlays_are_deterministic() {
        let s = spec(Weather::Rain, 0.6, 99);
        assert_eq!(rain_mask(&s, 64, 64), rain_mask(&s, 64, 64));
        let s = spec(Weather::Snow, 0.6, 99);
        assert_eq!(snow_mask(&s, 64, 64), snow_mask(&s, 64, 64));
    }

    #[test]
    fn overlay_coverage_stays_in_band() {
        let target = 0.15 * 0.5;
        for seed in 0..20 {
            for mask in [
                rain_mask(&spec(Weather::Rain, 0.5, seed), 64, 64),
                snow_mask(&spec(Weather::Snow, 0.5, seed), 64, 64),
            ] {
                let c = mask.coverage();
                assert!((0.3 * target..=1.5 * target).contains(&c), "seed {seed}: coverage {c}");
            }
        }
    }

    #[test]
    fn degraded_psnr_is_monotone_in_severity() {
        for seed in 0..5 {
            let img = gen_clean(seed, 64, 64).unwrap();
            for w in [Weather::Rain, Weather::Snow, Weather::Haze] {
                let scores: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
                    .iter()
                    .map(|&s| psnr(&img, &degrade(&img, &spec(w, s, seed)).unwrap(), 1.0).unwrap())
                    .collect();
                assert!(scores.windows(2).all(|p| p[1] <= p[0]), "{w} seed {seed}: {scores:?}");
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        for seed in 0..10 {
            let img = gen_clean(seed, 32, 32).unwrap();
            for w in Weather::ALL {
                let out = degrade(&img, &spec(w, 1.0, seed)).unwrap();
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn dataset_is_deterministic_and_respects_mix() {
        let ds = DatasetSpec {
            count: 10,
            mix: WeatherMix::only(Weather::Rain),
            height: 16,
            width: 16,
            severity: (0.2, 0.8),
            seed: 4,
        };
        let a = make_dataset(&ds).unwrap();
        assert_eq!(a.manifest(), make_dataset(&ds).unwrap().manifest());
        assert!(a.samples.iter().all(|s| s.spec.weather == Weather::Rain));
        assert!(a.samples.iter().all(|s| (0.2..=0.8).contains(&s.spec.severity)));
        assert!(WeatherMix::new(vec![]).is_err());
        assert!("".parse::<WeatherMix>().is_err());
        assert!(make_dataset(&DatasetSpec { count: 0, ..ds }).is_err());
    }

    #[test]
    fn degraded_psnr_band_at_severity_point_seven() {
        let ds = make_dataset(&DatasetSpec {
            count: 50,
            mix: WeatherMix::uniform(),
            height: 64,
            width: 64,
            severity: (0.7, 0.7),
            seed: 2024,
        })
        .unwrap();
        let mean = ds
            .samples
            .iter()
            .map(|s| psnr(&s.clean, &s.degraded, 1.0).unwrap())
            .sum::<f64>()
            / 50.0;
        assert!((10.0..=25.0).contains(&mean), "{mean}");
    }

    #[test]
    fn manifest_round_trips() {
        let ds = make_dataset(&DatasetSpec {
            count: 4,
            mix: "rain:1,haze:2".parse().unwrap(),
            height: 8,
            width: 8,
            severity: (0.0, 1.0),
            seed: 17,
        })
        .unwrap();
        let parsed = parse_manifest(&ds.manifest()).unwrap();
        let specs: Vec<DegradationSpec> = ds.samples.iter().map(|s| s.spec).collect();
        assert_eq!(parsed.into_iter().map(|(_, s)| s).collect::<Vec<_>>(), specs);
    }
}
