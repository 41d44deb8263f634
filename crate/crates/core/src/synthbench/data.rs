//! Three-family synthetic conditions with block-structured targets.
//!
//! A condition `x` (1×d) is split into `n` contiguous coordinate blocks
//! (identity, texture, layout for the three default tasks). Samples of task
//! `t` are drawn around a task-specific centre, and their target depends only
//! on block `t` of `x`: `target[out block t] = x[block t] · P_t`, with every
//! other output block zero, plus N(0, σ²) noise on all outputs.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;

use crate::conditioning::contiguous_blocks;
use crate::config::TrainConfig;
use crate::error::{AtmError, Result};
use crate::numerics::{Matrix, SeedStreams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Subject = 0,
    Style = 1,
    Structure = 2,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Subject, TaskKind::Style, TaskKind::Structure];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Subject => "subject",
            TaskKind::Style => "style",
            TaskKind::Structure => "structure",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "subject" | "0" => Ok(TaskKind::Subject),
            "style" | "1" => Ok(TaskKind::Style),
            "structure" | "2" => Ok(TaskKind::Structure),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub x: Matrix,
    /// Task index; `TaskKind` covers the first three.
    pub task: usize,
    pub target: Matrix,
}

impl SynthSample {
    pub fn kind(&self) -> Option<TaskKind> {
        TaskKind::from_index(self.task)
    }
}

/// Minimum centre-to-centre distance in units of the cluster std.
pub const MIN_CENTER_SEPARATION: f64 = 6.0;

/// Frozen task definitions (cluster centres and target maps) for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    centers: Vec<Matrix>,
    maps: Vec<Matrix>,
    input_blocks: Vec<Range<usize>>,
    output_blocks: Vec<Range<usize>>,
    cluster_std: f64,
}

impl Benchmark {
    pub fn new(seed: u64, tasks: usize, d: usize, d_out: usize, cluster_std: f64) -> Result<Self> {
        if tasks < 2 || d % tasks != 0 || d_out % tasks != 0 {
            return Err(AtmError::contract(format!(
                "benchmark needs n >= 2 tasks dividing d={d} and d_out={d_out}, got n={tasks}"
            )));
        }
        let streams = SeedStreams::new(seed);
        let input_blocks = contiguous_blocks(d, tasks)?;
        let output_blocks = contiguous_blocks(d_out, tasks)?;

        // Centre coordinates ~ N(0, (1.5 s)^2) put typical pairwise distances
        // near 1.5 s sqrt(2d); redraw until every pair clears the minimum.
        let mut rng = streams.stream("data.centers");
        let min_dist = MIN_CENTER_SEPARATION * cluster_std;
        let centers = loop {
            let cs: Vec<Matrix> = (0..tasks)
                .map(|_| Matrix::random_normal(1, d, 1.5 * cluster_std.max(f64::MIN_POSITIVE), &mut rng))
                .collect();
            let ok = (0..tasks)
                .all(|a| (a + 1..tasks).all(|b| cs[a].sub(&cs[b]).expect("same shape").frobenius_norm() >= min_dist));
            if ok {
                break cs;
            }
        };

        let mut rng = streams.stream("data.maps");
        let maps = input_blocks
            .iter()
            .zip(&output_blocks)
            .map(|(ib, ob)| Matrix::random_normal(ib.len(), ob.len(), 1.0 / (ib.len() as f64).sqrt(), &mut rng))
            .collect();

        Ok(Self {
            centers,
            maps,
            input_blocks,
            output_blocks,
            cluster_std,
        })
    }

    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        let d = &config.dims;
        Self::new(config.seed, d.n, d.d, d.d_out, config.cluster_std)
    }

    pub fn tasks(&self) -> usize {
        self.centers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_blocks.last().map_or(0, |r| r.end)
    }

    pub fn output_dim(&self) -> usize {
        self.output_blocks.last().map_or(0, |r| r.end)
    }

    pub fn center(&self, task: usize) -> &Matrix {
        &self.centers[task]
    }

    pub fn input_block(&self, task: usize) -> Range<usize> {
        self.input_blocks[task].clone()
    }

    pub fn output_block(&self, task: usize) -> Range<usize> {
        self.output_blocks[task].clone()
    }

    pub fn map(&self, task: usize) -> &Matrix {
        &self.maps[task]
    }

    /// Noise-free target for condition `x` of task `task`.
    pub fn clean_target(&self, x: &Matrix, task: usize) -> Result<Matrix> {
        if task >= self.tasks() {
            return Err(AtmError::Routing {
                index: task,
                count: self.tasks(),
            });
        }
        if x.shape() != (1, self.input_dim()) {
            return Err(AtmError::dim("clean_target", x.shape(), (1, self.input_dim())));
        }
        let ib = self.input_block(task);
        let block = Matrix::row_vector(&x.row(0)[ib]);
        let projected = block.matmul(&self.maps[task])?;
        let mut target = Matrix::zeros(1, self.output_dim());
        for (j, o) in self.output_block(task).enumerate() {
            target.set(0, o, projected.get(0, j));
        }
        Ok(target)
    }

    /// `count` samples, task `i % n` for the `i`-th, so tasks are balanced to
    /// within one.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize, noise_sigma: f64) -> Result<Vec<SynthSample>> {
        let d = self.input_dim();
        (0..count)
            .map(|i| {
                let task = i % self.tasks();
                let x = self.centers[task].add(&Matrix::random_normal(1, d, self.cluster_std, rng))?;
                let mut target = self.clean_target(&x, task)?;
                if noise_sigma > 0.0 {
                    target = target.add(&Matrix::random_normal(1, self.output_dim(), noise_sigma, rng))?;
                }
                Ok(SynthSample { x, task, target })
            })
            .collect()
    }
}

/// Default-shaped benchmark samples for `seed`.
pub fn generate(seed: u64, count: usize, noise_sigma: f64) -> Result<Vec<SynthSample>> {
    if count == 0 {
        return Err(AtmError::contract("generate needs count > 0"));
    }
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let bench = Benchmark::from_config(&config)?;
    let mut rng = SeedStreams::new(seed).stream("data.samples");
    bench.sample(&mut rng, count, noise_sigma)
}

/// Training and held-out samples for a run, from independent streams.
pub fn train_eval_split(config: &TrainConfig) -> Result<(Benchmark, Vec<SynthSample>, Vec<SynthSample>)> {
    let bench = Benchmark::from_config(config)?;
    let streams = SeedStreams::new(config.seed);
    let train = bench.sample(
        &mut streams.stream("data.train"),
        config.train_samples,
        config.noise_sigma,
    )?;
    let eval = bench.sample(
        &mut streams.stream("data.eval"),
        config.eval_samples,
        config.noise_sigma,
    )?;
    Ok((bench, train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_is_deterministic() {
        assert_eq!(generate(4, 30, 0.05).unwrap(), generate(4, 30, 0.05).unwrap());
        assert_ne!(generate(4, 30, 0.05).unwrap(), generate(5, 30, 0.05).unwrap());
        assert!(generate(4, 0, 0.05).is_err());
    }

    #[test]
    fn balanced_tasks() {
        let s = generate(1, 9, 0.05).unwrap();
        for t in 0..3 {
            assert_eq!(s.iter().filter(|x| x.task == t).count(), 3);
        }
        let s = generate(1, 10, 0.05).unwrap();
        let counts: Vec<usize> = (0..3).map(|t| s.iter().filter(|x| x.task == t).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn noiseless_target_is_block_product() {
        let bench = Benchmark::from_config(&TrainConfig::default()).unwrap();
        let mut rng = SeedStreams::new(1).stream("data.samples");
        let samples = generate(1, 12, 0.0).unwrap();
        // same stream, same draws
        let again = bench.sample(&mut rng, 12, 0.0).unwrap();
        assert_eq!(samples, again);
        for s in &samples {
            let ib = bench.input_block(s.task);
            let ob = bench.output_block(s.task);
            let block = Matrix::row_vector(&s.x.row(0)[ib]);
            let direct = block.matmul(bench.map(s.task)).unwrap();
            for o in 0..bench.output_dim() {
                let want = if ob.contains(&o) {
                    direct.get(0, o - ob.start)
                } else {
                    0.0
                };
                assert_eq!(s.target.get(0, o), want);
            }
        }
    }

    #[test]
    fn centers_are_separated() {
        for seed in 0..20 {
            let bench = Benchmark::new(seed, 3, 24, 12, 1.0).unwrap();
            for a in 0..3 {
                for b in a + 1..3 {
                    let dist = bench.center(a).sub(bench.center(b)).unwrap().frobenius_norm();
                    assert!(dist >= MIN_CENTER_SEPARATION);
                }
            }
        }
    }

    #[test]
    fn task_kind_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
            assert_eq!(TaskKind::from_index(k.index()), Some(k));
        }
        assert!(TaskKind::from_index(3).is_none());
    }
}
