//! Separable 2D discrete wavelet transform and the annealed frequency loss.

use crate::error::{Error, Result};
use crate::image::{Image, LUMA};

/// Analysis filters, applied with periodic extension.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterPair {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

impl FilterPair {
    pub fn haar() -> Self {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            h: vec![r, r],
            g: vec![r, -r],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h.is_empty() || self.h.len() != self.g.len() || self.h.len() % 2 != 0 {
            return Err(Error::InvalidInput(
                "filter taps must be non-empty, even and of equal length".into(),
            ));
        }
        Ok(())
    }
}

impl Default for FilterPair {
    fn default() -> Self {
        Self::haar()
    }
}

/// One decomposition level. `lh` is low-pass down the columns and high-pass
/// along the rows; `hl` the reverse.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands {
    pub ll: Image,
    pub lh: Image,
    pub hl: Image,
    pub hh: Image,
}

impl WaveletBands {
    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .map(|b| b.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

fn analyze_line(
    src: &[f64],
    stride: usize,
    n: usize,
    f: &FilterPair,
    lo: &mut [f64],
    hi: &mut [f64],
) {
    for k in 0..n / 2 {
        let (mut l, mut h) = (0.0, 0.0);
        for (j, (fh, fg)) in f.h.iter().zip(&f.g).enumerate() {
            let v = src[((2 * k + j) % n) * stride];
            l += fh * v;
            h += fg * v;
        }
        lo[k] = l;
        hi[k] = h;
    }
}

fn synthesize_line(
    lo: &[f64],
    hi: &[f64],
    n: usize,
    f: &FilterPair,
    dst: &mut [f64],
    stride: usize,
) {
    for i in 0..n {
        dst[i * stride] = 0.0;
    }
    for k in 0..n / 2 {
        for (j, (fh, fg)) in f.h.iter().zip(&f.g).enumerate() {
            dst[((2 * k + j) % n) * stride] += fh * lo[k] + fg * hi[k];
        }
    }
}

fn check_even(image: &Image) -> Result<()> {
    if image.width() % 2 != 0 || image.height() % 2 != 0 || image.is_empty() {
        return Err(Error::InvalidInput(format!(
            "wavelet transform needs even, non-zero dimensions, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Single-level decomposition of every channel.
pub fn dwt2(image: &Image, filters: &FilterPair) -> Result<WaveletBands> {
    filters.validate()?;
    check_even(image)?;
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let (w2, h2) = (w / 2, h / 2);
    // Rows first: L and H halves side by side.
    let mut rows = vec![0.0; w * h * ch];
    let (mut lo, mut hi) = (vec![0.0; w2.max(h2)], vec![0.0; w2.max(h2)]);
    for c in 0..ch {
        for y in 0..h {
            analyze_line(
                &image.data()[y * w * ch + c..],
                ch,
                w,
                filters,
                &mut lo,
                &mut hi,
            );
            for k in 0..w2 {
                rows[(y * w + k) * ch + c] = lo[k];
                rows[(y * w + w2 + k) * ch + c] = hi[k];
            }
        }
    }
    let mut bands = [
        Image::zeros(w2, h2, ch),
        Image::zeros(w2, h2, ch),
        Image::zeros(w2, h2, ch),
        Image::zeros(w2, h2, ch),
    ];
    for c in 0..ch {
        for x in 0..w {
            analyze_line(&rows[x * ch + c..], w * ch, h, filters, &mut lo, &mut hi);
            let (low_col, kx) = if x < w2 { (true, x) } else { (false, x - w2) };
            for k in 0..h2 {
                // [LL, LH, HL, HH] indexed by (vertical high, horizontal high).
                let (bl, bh) = if low_col { (0, 2) } else { (1, 3) };
                bands[bl].set(kx, k, c, lo[k]);
                bands[bh].set(kx, k, c, hi[k]);
            }
        }
    }
    let [ll, lh, hl, hh] = bands;
    Ok(WaveletBands { ll, lh, hl, hh })
}

/// Synthesis operator: the adjoint of [`dwt2`], and its inverse for
/// orthonormal filters.
pub fn idwt2(bands: &WaveletBands, filters: &FilterPair) -> Result<Image> {
    filters.validate()?;
    let (w2, h2, ch) = (bands.ll.width(), bands.ll.height(), bands.ll.channels());
    for b in [&bands.lh, &bands.hl, &bands.hh] {
        bands.ll.check_same_shape(b)?;
    }
    let (w, h) = (2 * w2, 2 * h2);
    let mut rows = vec![0.0; w * h * ch];
    let (mut lo, mut hi) = (vec![0.0; w2.max(h2)], vec![0.0; w2.max(h2)]);
    for c in 0..ch {
        for x in 0..w {
            let (a, b, kx) = if x < w2 {
                (&bands.ll, &bands.hl, x)
            } else {
                (&bands.lh, &bands.hh, x - w2)
            };
            for k in 0..h2 {
                lo[k] = a.get(kx, k, c);
                hi[k] = b.get(kx, k, c);
            }
            synthesize_line(
                &lo[..h2],
                &hi[..h2],
                h,
                filters,
                &mut rows[x * ch + c..],
                w * ch,
            );
        }
    }
    let mut out = Image::zeros(w, h, ch);
    for c in 0..ch {
        for y in 0..h {
            for k in 0..w2 {
                lo[k] = rows[(y * w + k) * ch + c];
                hi[k] = rows[(y * w + w2 + k) * ch + c];
            }
            synthesize_line(
                &lo[..w2],
                &hi[..w2],
                w,
                filters,
                &mut out.data_mut()[y * w * ch + c..],
                ch,
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BandWeights {
    pub ll: f64,
    pub lh: f64,
    pub hl: f64,
    pub hh: f64,
}

impl Default for BandWeights {
    fn default() -> Self {
        Self {
            ll: 1.0,
            lh: 1.0,
            hl: 1.0,
            hh: 1.0,
        }
    }
}

impl BandWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ll, self.lh, self.hl, self.hh]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::InvalidInput(
                "band weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted per-band distances. Each band norm is divided by the square root
/// of the band's element count, so values are root-mean-square and do not
/// grow with resolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Discrepancy {
    pub ll: f64,
    pub lh: f64,
    pub hl: f64,
    pub hh: f64,
}

impl Discrepancy {
    pub fn high(&self) -> f64 {
        self.lh + self.hl + self.hh
    }

    pub fn total(&self) -> f64 {
        self.ll + self.high()
    }
}

fn rms_diff(a: &Image, b: &Image) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (s / a.len() as f64).sqrt()
}

/// Single-level discrepancy between two images.
pub fn band_discrepancy(
    a: &Image,
    b: &Image,
    filters: &FilterPair,
    weights: &BandWeights,
) -> Result<Discrepancy> {
    a.check_same_shape(b)?;
    weights.validate()?;
    let (x, y) = (dwt2(a, filters)?, dwt2(b, filters)?);
    Ok(Discrepancy {
        ll: weights.ll * rms_diff(&x.ll, &y.ll),
        lh: weights.lh * rms_diff(&x.lh, &y.lh),
        hl: weights.hl * rms_diff(&x.hl, &y.hl),
        hh: weights.hh * rms_diff(&x.hh, &y.hh),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnnealSchedule {
    pub n0: usize,
    pub n1: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { n0: 100, n1: 200 }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.n0 && self.n0 < self.n1) {
            return Err(Error::InvalidInput(format!(
                "anneal schedule needs 0 < n0 < n1, got {} and {}",
                self.n0, self.n1
            )));
        }
        Ok(())
    }

    /// High-band weight at iteration `n` (counted from 1).
    pub fn weight(&self, n: usize) -> f64 {
        if n <= self.n0 {
            0.0
        } else if n <= self.n1 {
            (n - self.n0) as f64 / (self.n1 - self.n0) as f64
        } else {
            1.0
        }
    }

    pub fn branch(&self, n: usize) -> FrequencyBranch {
        if n <= self.n0 {
            FrequencyBranch::Low
        } else if n <= self.n1 {
            FrequencyBranch::Blend
        } else {
            FrequencyBranch::High
        }
    }
}

/// Which part of the frequency loss is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyBranch {
    Low,
    Blend,
    High,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FrequencyConfig {
    pub filters: FilterPair,
    pub weights: BandWeights,
    pub schedule: AnnealSchedule,
    pub levels: usize,
    /// Compare luminance instead of every colour channel.
    pub luminance: bool,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self {
            filters: FilterPair::haar(),
            weights: BandWeights::default(),
            schedule: AnnealSchedule::default(),
            levels: 1,
            luminance: true,
        }
    }
}

impl FrequencyConfig {
    pub fn validate(&self) -> Result<()> {
        self.filters.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.levels == 0 {
            return Err(Error::InvalidInput(
                "wavelet levels must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyLoss {
    pub value: f64,
    /// Gradient with respect to the rendered image.
    pub grad: Image,
    pub branch: FrequencyBranch,
    pub high_weight: f64,
    /// Discrepancies summed over levels.
    pub discrepancy: Discrepancy,
}

/// Gradient of `w * rms(x - y)` with respect to `y`.
fn rms_grad(x: &Image, y: &Image, w: f64, scale: f64) -> Image {
    let d = rms_diff(x, y);
    let mut g = y.clone();
    let denom = d * x.len() as f64;
    for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
        *gv = if d > 0.0 {
            scale * w * (*gv - xv) / denom
        } else {
            0.0
        };
    }
    g
}

/// Annealed frequency loss `(1 - w_h) d_LL + w_h d_H` at iteration `n` and
/// its gradient with respect to `rendered`.
pub fn frequency_loss(
    target: &Image,
    rendered: &Image,
    n: usize,
    cfg: &FrequencyConfig,
) -> Result<FrequencyLoss> {
    target.check_same_shape(rendered)?;
    cfg.validate()?;
    let (x0, y0) = if cfg.luminance {
        (target.luminance(), rendered.luminance())
    } else {
        (target.clone(), rendered.clone())
    };
    let wh = cfg.schedule.weight(n);
    let wl = 1.0 - wh;

    let mut x = x0;
    let mut y = y0;
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut disc = Discrepancy::default();
    for _ in 0..cfg.levels {
        let bx = dwt2(&x, &cfg.filters)?;
        let by = dwt2(&y, &cfg.filters)?;
        let wts = &cfg.weights;
        disc.ll += wts.ll * rms_diff(&bx.ll, &by.ll);
        disc.lh += wts.lh * rms_diff(&bx.lh, &by.lh);
        disc.hl += wts.hl * rms_diff(&bx.hl, &by.hl);
        disc.hh += wts.hh * rms_diff(&bx.hh, &by.hh);
        x = bx.ll.clone();
        y = by.ll.clone();
        levels.push((bx, by));
    }
    let value = wl * disc.ll + wh * disc.high();

    // Back through the levels, carrying the LL gradient downwards.
    let wts = &cfg.weights;
    let mut g_ll_carry: Option<Image> = None;
    for (bx, by) in levels.iter().rev() {
        let mut g_ll = rms_grad(&bx.ll, &by.ll, wts.ll, wl);
        if let Some(c) = g_ll_carry.take() {
            for (a, b) in g_ll.data_mut().iter_mut().zip(c.data()) {
                *a += b;
            }
        }
        let bands = WaveletBands {
            ll: g_ll,
            lh: rms_grad(&bx.lh, &by.lh, wts.lh, wh),
            hl: rms_grad(&bx.hl, &by.hl, wts.hl, wh),
            hh: rms_grad(&bx.hh, &by.hh, wts.hh, wh),
        };
        g_ll_carry = Some(idwt2(&bands, &cfg.filters)?);
    }
    let g = g_ll_carry.unwrap();
    let grad = if cfg.luminance && rendered.channels() == 3 {
        Image::from_fn(rendered.width(), rendered.height(), 3, |px, py, c| {
            LUMA[c] * g.get(px, py, 0)
        })
    } else {
        g
    };
    Ok(FrequencyLoss {
        value,
        grad,
        branch: cfg.schedule.branch(n),
        high_weight: wh,
        discrepancy: disc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.random())
    }

    #[test]
    fn two_by_two_haar_matches_direct_convolution() {
        let (a, b, c, d) = (0.3, -1.2, 2.5, 0.7);
        let im = Image::from_vec(2, 2, 1, vec![a, b, c, d]).unwrap();
        let bands = dwt2(&im, &FilterPair::haar()).unwrap();
        let close = |x: f64, y: f64| assert!((x - y).abs() < 1e-15, "{x} vs {y}");
        close(bands.ll.get(0, 0, 0), (a + b + c + d) / 2.0);
        close(bands.lh.get(0, 0, 0), (a - b + c - d) / 2.0);
        close(bands.hl.get(0, 0, 0), (a + b - c - d) / 2.0);
        close(bands.hh.get(0, 0, 0), (a - b - c + d) / 2.0);
    }

    #[test]
    fn constant_image_has_no_high_frequencies() {
        let im = Image::filled(8, 6, 3, 0.4);
        let b = dwt2(&im, &FilterPair::haar()).unwrap();
        assert!(b.ll.data().iter().all(|v| (v - 0.8).abs() < 1e-14));
        for band in [&b.lh, &b.hl, &b.hh] {
            assert!(band.data().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn odd_dimensions_are_rejected() {
        assert!(dwt2(&Image::zeros(5, 4, 1), &FilterPair::haar()).is_err());
        assert!(dwt2(&Image::zeros(4, 3, 1), &FilterPair::haar()).is_err());
    }

    #[test]
    fn anneal_boundaries() {
        let s = AnnealSchedule::default();
        assert_eq!(s.weight(1), 0.0);
        assert_eq!(s.weight(100), 0.0);
        assert_eq!(s.weight(150), 0.5);
        assert_eq!(s.weight(200), 1.0);
        assert_eq!(s.weight(201), 1.0);
    }

    #[test]
    fn discrepancy_examples() {
        let a = random_image(1, 16, 12, 3);
        let f = FilterPair::haar();
        let w = BandWeights::default();
        assert_eq!(band_discrepancy(&a, &a, &f, &w).unwrap().total(), 0.0);
        let shifted = a.map(|v| v + 0.25);
        let d = band_discrepancy(&a, &shifted, &f, &w).unwrap();
        assert!(d.high() < 1e-14);
        assert!((d.ll - 0.5).abs() < 1e-12);
        // Oracle: transform both, then take norms directly.
        let b = random_image(2, 16, 12, 3);
        let d = band_discrepancy(&a, &b, &f, &w).unwrap();
        let (x, y) = (dwt2(&a, &f).unwrap(), dwt2(&b, &f).unwrap());
        let norm = |p: &Image, q: &Image| {
            let s: f64 = p
                .data()
                .iter()
                .zip(q.data())
                .map(|(u, v)| (u - v).powi(2))
                .sum();
            s.sqrt() / (p.len() as f64).sqrt()
        };
        assert!((d.ll - norm(&x.ll, &y.ll)).abs() < 1e-15);
        assert!((d.hh - norm(&x.hh, &y.hh)).abs() < 1e-15);
    }

    #[test]
    fn frequency_loss_branches() {
        let cfg = FrequencyConfig::default();
        let a = random_image(3, 16, 16, 3);
        let b = random_image(4, 16, 16, 3);
        let low = frequency_loss(&a, &b, 50, &cfg).unwrap();
        let d =
            band_discrepancy(&a.luminance(), &b.luminance(), &cfg.filters, &cfg.weights).unwrap();
        assert_eq!(low.value, d.ll);
        assert_eq!(low.branch, FrequencyBranch::Low);
        let offset = a.map(|v| v + 0.1);
        assert!(frequency_loss(&a, &offset, 300, &cfg).unwrap().value < 1e-14);
        for n in [1, 100, 150, 250] {
            assert_eq!(frequency_loss(&a, &a, n, &cfg).unwrap().value, 0.0);
        }
        for n in [100, 200] {
            let at = frequency_loss(&a, &b, n, &cfg).unwrap().value;
            let expected = if n == 100 { d.ll } else { d.high() };
            assert!((at - expected).abs() < 1e-12);
        }
    }

    /// With a very long ramp, one iteration past either boundary moves the
    /// loss by at most a 1e-13 fraction of the band gap.
    #[test]
    fn frequency_loss_is_continuous_at_the_boundaries() {
        let a = random_image(9, 16, 16, 3);
        let b = random_image(10, 16, 16, 3);
        let span = 10_000_000_000_000;
        let lo = FrequencyConfig {
            schedule: AnnealSchedule {
                n0: 100,
                n1: 100 + span,
            },
            ..Default::default()
        };
        let f = |cfg: &FrequencyConfig, n: usize| frequency_loss(&a, &b, n, cfg).unwrap().value;
        assert!((f(&lo, 101) - f(&lo, 100)).abs() < 1e-12);
        let far = FrequencyConfig {
            schedule: AnnealSchedule {
                n0: 1,
                n1: 1 + span,
            },
            ..Default::default()
        };
        assert!((f(&far, 1 + span) - f(&far, span)).abs() < 1e-12);
        assert!((f(&far, 2 + span) - f(&far, 1 + span)).abs() < 1e-12);
    }

    fn check_gradient(cfg: &FrequencyConfig, n: usize, seed: u64) {
        let a = random_image(seed, 12, 8, 3);
        let b = random_image(seed + 1, 12, 8, 3);
        let l = frequency_loss(&a, &b, n, cfg).unwrap();
        let eps = 1e-6;
        for idx in (0..b.len()).step_by(7) {
            let mut p = b.clone();
            let mut m = b.clone();
            p.data_mut()[idx] += eps;
            m.data_mut()[idx] -= eps;
            let fd = (frequency_loss(&a, &p, n, cfg).unwrap().value
                - frequency_loss(&a, &m, n, cfg).unwrap().value)
                / (2.0 * eps);
            let g = l.grad.data()[idx];
            assert!(
                (g - fd).abs() <= 1e-3 * fd.abs().max(1e-6),
                "n={n} idx={idx}: {g} vs {fd}"
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        check_gradient(&FrequencyConfig::default(), 60, 5);
        check_gradient(&FrequencyConfig::default(), 150, 6);
        check_gradient(&FrequencyConfig::default(), 260, 7);
        check_gradient(
            &FrequencyConfig {
                luminance: false,
                levels: 2,
                ..Default::default()
            },
            150,
            8,
        );
    }

    /// A one-pixel shift of a vertical edge barely moves mean L1 but
    /// re-distributes the edge into a different high band.
    #[test]
    fn edge_shift_is_more_visible_in_high_bands() {
        let (w, h) = (32, 16);
        let edge =
            |x0: usize| Image::from_fn(w, h, 3, move |x, _, _| if x > x0 { 1.0 } else { 0.0 });
        let (a, b) = (edge(14), edge(15));
        let black = Image::zeros(w, h, 3);
        let f = FilterPair::haar();
        let wts = BandWeights::default();
        let dh = |p: &Image, q: &Image| {
            band_discrepancy(&p.luminance(), &q.luminance(), &f, &wts)
                .unwrap()
                .high()
        };
        let l1 = |p: &Image, q: &Image| {
            p.data()
                .iter()
                .zip(q.data())
                .map(|(u, v)| (u - v).abs())
                .sum::<f64>()
                / p.len() as f64
        };
        let rel_dh = dh(&a, &b) / dh(&a, &black);
        let rel_l1 = l1(&a, &b) / l1(&a, &black);
        assert!(rel_dh >= rel_l1, "{rel_dh} vs {rel_l1}");
    }

    proptest! {
        #[test]
        fn perfect_reconstruction_and_parseval(seed in 0u64..10_000, hw in 1usize..10, hh in 1usize..10, c in 1usize..4) {
            let im = random_image(seed, 2 * hw, 2 * hh, c);
            let f = FilterPair::haar();
            let bands = dwt2(&im, &f).unwrap();
            let back = idwt2(&bands, &f).unwrap();
            let err = im.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-10);
            let e: f64 = im.data().iter().map(|v| v * v).sum();
            prop_assert!((e - bands.energy()).abs() < 1e-8);
        }
    }
}
