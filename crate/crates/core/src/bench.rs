//! Rasterizer throughput on a full-size posed avatar, single-threaded and on
//! a worker pool.

use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;

use crate::body_model::{forward_lbs_unchecked, SyntheticBodyConfig};
use crate::dataio::{sample_attributes, sample_pose, RigConfig};
use crate::error::{Error, Result};
use crate::gaussian::{scaffold, GaussianSet, ScaffoldConfig};
use crate::image::Image;
use crate::raster::{render, render_backward, Camera};

/// Frame rate of the reference GPU implementation for a full forward pass,
/// quoted for context only.
pub const REFERENCE_FPS: f64 = 47.0;
pub const TARGET_SINGLE_MS: f64 = 50.0;
pub const TARGET_POOL_MS: f64 = 15.0;

#[derive(Clone, Debug, Serialize)]
pub struct BenchOptions {
    pub resolution: usize,
    pub frames: usize,
    pub warmup: usize,
    /// Thread counts to time, in order.
    pub threads: Vec<usize>,
    pub backward: bool,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            resolution: 256,
            frames: 20,
            warmup: 2,
            threads: vec![1, 8],
            backward: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub threads: usize,
    pub forward_ms_mean: f64,
    pub forward_ms_median: f64,
    pub forward_fps: f64,
    pub backward_ms_median: Option<f64>,
    pub target_ms: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub gaussians: usize,
    pub resolution: usize,
    pub frames: usize,
    pub rows: Vec<BenchRow>,
    /// Renders from every thread count were bit-identical.
    pub deterministic: bool,
    pub reference_fps: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{} Gaussians at {}x{}, {} frames (reference GPU forward pass: {:.0} fps = {:.1} ms)\n",
            self.gaussians,
            self.resolution,
            self.resolution,
            self.frames,
            self.reference_fps,
            1000.0 / self.reference_fps
        );
        s.push_str("threads  fwd ms (median)  fwd ms (mean)  fwd fps  bwd ms (median)  target ms\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:>7}  {:>15.2}  {:>13.2}  {:>7.1}  {:>15}  {:>9}\n",
                r.threads,
                r.forward_ms_median,
                r.forward_ms_mean,
                r.forward_fps,
                r.backward_ms_median.map_or("-".to_string(), |v| format!("{v:.2}")),
                r.target_ms.map_or("-".to_string(), |v| format!("< {v:.0}")),
            ));
        }
        s.push_str(&format!(
            "bitwise identical across thread counts: {}\n",
            if self.deterministic { "yes" } else { "NO" }
        ));
        s
    }
}

/// Default synthetic body at a random pose with random appearance, framed by
/// a square camera of the given resolution.
pub fn bench_scene(resolution: usize, seed: u64) -> Result<(GaussianSet, Camera)> {
    let model = SyntheticBodyConfig::default().build()?;
    let cfg = ScaffoldConfig::default();
    let pose = sample_pose(model.num_joints(), seed, 25.0, 15.0);
    let betas = vec![0.0; model.num_betas()];
    let lbs = forward_lbs_unchecked(&model, &pose, &betas);
    let attrs = sample_attributes(&model, &cfg, seed ^ 0xbe4c, 0.02);
    let set = scaffold(&lbs.vertices, &attrs, &cfg)?;
    let rig = RigConfig {
        views: 1,
        width: resolution,
        height: resolution,
        ..Default::default()
    };
    let cam = rig.cameras(&lbs.joints[0])?.remove(0);
    Ok((set, cam))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn run_bench(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.frames == 0 || opts.threads.is_empty() || opts.threads.contains(&0) {
        return Err(Error::invalid("bench needs at least one frame and positive thread counts"));
    }
    let (set, cam) = bench_scene(opts.resolution, opts.seed)?;
    let bg = Vector3::zeros();
    let d_rgb = Image::filled(cam.width, cam.height, 3, 1.0);
    let d_alpha = Image::filled(cam.width, cam.height, 1, 1.0);
    let mut rows = Vec::new();
    let mut first = None;
    let mut deterministic = true;
    for &threads in &opts.threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        let (fwd, bwd, img) = pool.install(|| -> Result<_> {
            for _ in 0..opts.warmup {
                render(&set, &cam, &bg)?;
            }
            let mut fwd = Vec::with_capacity(opts.frames);
            let mut img = None;
            for _ in 0..opts.frames {
                let t = Instant::now();
                img = Some(render(&set, &cam, &bg)?);
                fwd.push(t.elapsed().as_secs_f64() * 1e3);
            }
            let mut bwd = Vec::new();
            if opts.backward {
                for _ in 0..opts.frames {
                    let t = Instant::now();
                    render_backward(&set, &cam, &bg, &d_rgb, &d_alpha)?;
                    bwd.push(t.elapsed().as_secs_f64() * 1e3);
                }
            }
            Ok((fwd, bwd, img.expect("at least one frame")))
        })?;
        match &first {
            None => first = Some(img),
            Some(f) => deterministic &= *f == img,
        }
        let mean = fwd.iter().sum::<f64>() / fwd.len() as f64;
        let mut fwd = fwd;
        let med = median(&mut fwd);
        let mut bwd = bwd;
        rows.push(BenchRow {
            threads,
            forward_ms_mean: mean,
            forward_ms_median: med,
            forward_fps: 1000.0 / med,
            backward_ms_median: (!bwd.is_empty()).then(|| median(&mut bwd)),
            target_ms: match threads {
                1 => Some(TARGET_SINGLE_MS),
                8 => Some(TARGET_POOL_MS),
                _ => None,
            },
        });
    }
    Ok(BenchReport {
        gaussians: set.len(),
        resolution: opts.resolution,
        frames: opts.frames,
        rows,
        deterministic,
        reference_fps: REFERENCE_FPS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_reports_every_thread_count() {
        let opts = BenchOptions {
            resolution: 32,
            frames: 2,
            warmup: 0,
            threads: vec![1, 2],
            backward: false,
            seed: 1,
        };
        let r = run_bench(&opts).unwrap();
        assert_eq!(r.gaussians, 6890);
        assert_eq!(r.rows.len(), 2);
        assert!(r.deterministic);
        assert!(r.rows.iter().all(|row| row.forward_ms_median > 0.0 && row.backward_ms_median.is_none()));
        assert!(r.table().contains("47 fps"));
    }

    #[test]
    fn bench_frames_the_body() {
        let (set, cam) = bench_scene(64, 0).unwrap();
        let img = render(&set, &cam, &Vector3::zeros()).unwrap();
        let covered = img.alpha.data.iter().filter(|a| **a > 0.5).count();
        assert!(covered > 64 * 64 / 20, "{covered}");
        assert!(img.alpha.get(0, 0, 0) < 1e-3);
    }

    #[test]
    fn rejects_empty_runs() {
        let opts = BenchOptions {
            frames: 0,
            ..Default::default()
        };
        assert!(run_bench(&opts).is_err());
    }
}
