//! PSNR and SSIM over plain images, plus the per-image evaluation report.
//!
//! SSIM is the canonical single-scale form: channel-mean grayscale, 11×11
//! Gaussian window with σ = 1.5, C₁ = (0.01·peak)², C₂ = (0.03·peak)²,
//! averaged over valid (fully inside) windows. All accumulation is f64.

use crate::data::Image;
use crate::error::{Error, Result};

/// 10·log10(peak²/MSE), capped at 100 dB (the zero-MSE sentinel).
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return 100.0;
    }
    (10.0 * ((peak * peak) / mse).log10()).min(100.0)
}

fn check_same_shape(op: &'static str, x: &Image, y: &Image) -> Result<()> {
    if x.h != y.h || x.w != y.w {
        return Err(Error::dim(op, format!("{}×{} vs {}×{}", x.h, x.w, y.h, y.w)));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels.
pub fn psnr(x: &Image, y: &Image, peak: f64) -> Result<f64> {
    check_same_shape("psnr", x, y)?;
    if peak <= 0.0 || !peak.is_finite() {
        return Err(Error::Config(format!("psnr peak must be finite and > 0, got {peak}")));
    }
    let mse = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.numel() as f64;
    Ok(psnr_from_mse(mse, peak))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn grayscale(img: &Image) -> Vec<f64> {
    let (h, w) = (img.h, img.w);
    let mut g = vec![0.0f64; h * w];
    for c in 0..Image::CHANNELS {
        for (gi, src) in g.iter_mut().zip(&img.data[c * h * w..(c + 1) * h * w]) {
            *gi += *src as f64;
        }
    }
    for v in g.iter_mut() {
        *v /= Image::CHANNELS as f64;
    }
    g
}

/// Mean structural similarity over valid windows; peak 1.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    check_same_shape("ssim", x, y)?;
    let (h, w) = (x.h, x.w);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim",
            format!("image {h}×{w} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        ));
    }
    let gx = grayscale(x);
    let gy = grayscale(y);
    let k1 = ssim_kernel();
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;

    let mut total = 0.0f64;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, ki) in k1.iter().enumerate() {
                for (j, kj) in k1.iter().enumerate() {
                    let wgt = ki * kj;
                    let a = gx[(oy + i) * w + ox + j];
                    let b = gy[(oy + i) * w + ox + j];
                    mx += wgt * a;
                    my += wgt * b;
                    mxx += wgt * a * a;
                    myy += wgt * b * b;
                    mxy += wgt * a * b;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One evaluated image; reflection metrics may come from the `I − T̂`
/// fallback when the model does not emit R̂.
#[derive(Clone, Copy, Debug)]
pub struct ImageMetrics {
    pub id: usize,
    pub psnr_t: f64,
    pub ssim_t: f64,
    pub psnr_r: f64,
    pub ssim_r: f64,
}

/// Per-image rows plus arithmetic means.
#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub rows: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn push(&mut self, row: ImageMetrics) {
        self.rows.push(row);
    }

    fn mean_of(&self, f: impl Fn(&ImageMetrics) -> f64) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_psnr_t(&self) -> f64 {
        self.mean_of(|r| r.psnr_t)
    }

    pub fn mean_ssim_t(&self) -> f64 {
        self.mean_of(|r| r.ssim_t)
    }

    pub fn mean_psnr_r(&self) -> f64 {
        self.mean_of(|r| r.psnr_r)
    }

    pub fn mean_ssim_r(&self) -> f64 {
        self.mean_of(|r| r.ssim_r)
    }

    /// CSV with full-precision (round-trippable) floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,psnr_T,ssim_T,psnr_R,ssim_R\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id, r.psnr_t, r.ssim_t, r.psnr_r, r.ssim_r
            ));
        }
        out
    }

    /// Parse rows back from [`to_csv`] output (used by the re-sum audit).
    pub fn from_csv(text: &str) -> Result<MetricsReport> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 {
                if line != "image_id,psnr_T,ssim_T,psnr_R,ssim_R" {
                    return Err(Error::data("<csv>", format!("unexpected header {line:?}")));
                }
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::data("<csv>", format!("bad row {line:?}")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::data("<csv>", format!("bad number {s:?}")))
            };
            rows.push(ImageMetrics {
                id: parts[0]
                    .parse()
                    .map_err(|_| Error::data("<csv>", format!("bad id {:?}", parts[0])))?,
                psnr_t: parse(parts[1])?,
                ssim_t: parse(parts[2])?,
                psnr_r: parse(parts[3])?,
                ssim_r: parse(parts[4])?,
            });
        }
        Ok(MetricsReport { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_procedural_layer;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0, "MSE 0.01 at peak 1 is exactly 20 dB");
        assert_eq!(psnr_from_mse(0.0, 1.0), 100.0, "zero MSE caps at the 100 dB sentinel");
        let x = gen_procedural_layer(1, 16, 16).unwrap();
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), 100.0);
    }

    #[test]
    fn psnr_matches_loop_oracle_and_is_symmetric() {
        let x = gen_procedural_layer(2, 16, 16).unwrap();
        let y = gen_procedural_layer(3, 16, 16).unwrap();
        let mut mse = 0.0f64;
        for (a, b) in x.data.iter().zip(&y.data) {
            mse += (*a as f64 - *b as f64).powi(2);
        }
        mse /= x.numel() as f64;
        let expected = 10.0 * (1.0 / mse).log10();
        let got = psnr(&x, &y, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert_eq!(got, psnr(&y, &x, 1.0).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let x = gen_procedural_layer(4, 16, 16).unwrap();
        let mut r = rng::stream(5, "metrics-noise", 0);
        let noise: Vec<f32> = (0..x.numel()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let noisy = Image {
                h: x.h,
                w: x.w,
                data: x.data.iter().zip(&noise).map(|(&v, &n)| v + amp * n).collect(),
            };
            let p = psnr(&x, &noisy, 1.0).unwrap();
            assert!(p < last, "psnr must fall as noise grows: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn psnr_rejects_shape_mismatch_and_bad_peak() {
        let x = gen_procedural_layer(6, 16, 16).unwrap();
        let y = gen_procedural_layer(7, 16, 18).unwrap();
        assert!(psnr(&x, &y, 1.0).is_err());
        assert!(psnr(&x, &x, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_is_one() {
        let x = gen_procedural_layer(8, 20, 20).unwrap();
        let s = ssim(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim(x,x) = {s}");
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_low() {
        let mut r = rng::stream(9, "metrics-binary", 0);
        let mut x = Image::zeros(20, 20);
        for v in x.data.iter_mut() {
            *v = if r.gen_bool(0.5) { 1.0 } else { 0.0 };
        }
        let inv = Image { h: 20, w: 20, data: x.data.iter().map(|&v| 1.0 - v).collect() };
        let s = ssim(&x, &inv).unwrap();
        assert!(s < 0.5, "anti-correlated structure must score low, got {s}");
    }

    #[test]
    fn ssim_tolerates_tiny_noise_on_constant() {
        let mut x = Image::zeros(16, 16);
        x.data.fill(0.5);
        let mut r = rng::stream(10, "metrics-tiny", 0);
        let y = Image {
            h: 16,
            w: 16,
            data: x.data.iter().map(|&v| v + r.gen_range(-1e-4..1e-4)).collect(),
        };
        let s = ssim(&x, &y).unwrap();
        assert!(s > 0.99, "near-identical images must score near 1, got {s}");
    }

    #[test]
    fn metrics_are_flip_invariant() {
        let flip = |img: &Image| -> Image {
            let mut out = Image::zeros(img.h, img.w);
            for c in 0..3 {
                for y in 0..img.h {
                    for x in 0..img.w {
                        out.data[(c * img.h + y) * img.w + x] =
                            img.data[(c * img.h + y) * img.w + (img.w - 1 - x)];
                    }
                }
            }
            out
        };
        let x = gen_procedural_layer(11, 16, 16).unwrap();
        let y = gen_procedural_layer(12, 16, 16).unwrap();
        let p = psnr(&x, &y, 1.0).unwrap();
        let pf = psnr(&flip(&x), &flip(&y), 1.0).unwrap();
        assert!((p - pf).abs() < 1e-12);
        let s = ssim(&x, &y).unwrap();
        let sf = ssim(&flip(&x), &flip(&y)).unwrap();
        assert!((s - sf).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_the_window() {
        let x = gen_procedural_layer(13, 10, 16).unwrap();
        assert!(matches!(ssim(&x, &x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn report_means_and_csv_round_trip() {
        let mut rep = MetricsReport::default();
        rep.push(ImageMetrics { id: 0, psnr_t: 20.0, ssim_t: 0.9, psnr_r: 18.0, ssim_r: 0.8 });
        rep.push(ImageMetrics {
            id: 1,
            psnr_t: 30.123456789012345,
            ssim_t: 0.7,
            psnr_r: 22.0,
            ssim_r: 0.6,
        });
        assert_eq!(rep.mean_psnr_t(), (20.0 + 30.123456789012345) / 2.0);
        assert_eq!(rep.mean_ssim_r(), (0.8 + 0.6) / 2.0);
        let csv = rep.to_csv();
        let back = MetricsReport::from_csv(&csv).unwrap();
        assert_eq!(back.rows.len(), 2);
        for (a, b) in rep.rows.iter().zip(&back.rows) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.psnr_t.to_bits(), b.psnr_t.to_bits(), "full-precision round trip");
            assert_eq!(a.ssim_t.to_bits(), b.ssim_t.to_bits());
            assert_eq!(a.psnr_r.to_bits(), b.psnr_r.to_bits());
            assert_eq!(a.ssim_r.to_bits(), b.ssim_r.to_bits());
        }
    }
}
