//! Linear-versus-quadratic benchmark: one CMM block against one
//! self-attention block over growing sequence lengths.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cmm::{CmmBlock, CmmLayerConfig};
use crate::error::{Error, Result};
use crate::flops::{flops_attention, flops_cmm};
use crate::mamba::MambaConfig;
use crate::nn::Attention;
use crate::param::{Builder, ParamStore};
use crate::scan::ScanBlockPlan;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const MIN_POINTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub length: usize,
    pub cmm_ns: u128,
    pub attn_ns: u128,
    pub cmm_flops: u64,
    pub attn_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub d_model: usize,
    pub heads: usize,
    pub rows: Vec<BenchRow>,
    /// Log-log wall-time slopes.
    pub cmm_slope: f64,
    pub attn_slope: f64,
    /// Smallest length at which attention costs more FLOPs than CMM.
    pub crossover: u64,
}

/// The two blocks being compared.
pub struct BenchModels {
    pub cmm: CmmBlock,
    pub attn: Attention,
    pub layer: CmmLayerConfig,
    pub heads: usize,
    store: ParamStore,
}

impl BenchModels {
    pub fn new(d_model: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = CmmLayerConfig::new(1, 1, MambaConfig::new(d_model))?;
        let (cmm, attn) = {
            let mut b = Builder::new(&mut store, &mut rng);
            (
                CmmBlock::new(&mut b, "bench.cmm", layer)?,
                Attention::with_output(&mut b, "bench.attn", d_model, heads)?,
            )
        };
        Ok(BenchModels {
            cmm,
            attn,
            layer,
            heads,
            store,
        })
    }

    pub fn cmm_flops(&self, length: usize) -> u64 {
        flops_cmm(length as u64, length as u64, &self.layer)
    }

    pub fn attn_flops(&self, length: usize) -> u64 {
        flops_attention(length as u64, self.layer.mamba.d_model as u64, self.heads as u64)
    }

    /// One inference forward of the CMM block on two streams of `x`.
    pub fn run_cmm(&self, x: &Tensor) -> Result<()> {
        let mut t = Tape::inference(&self.store).with_scan_plan(ScanBlockPlan::default());
        let v = t.constant(x.clone());
        let l = t.constant(x.clone());
        std::hint::black_box(self.cmm.forward(&mut t, v, l)?);
        Ok(())
    }

    pub fn run_attn(&self, x: &Tensor) -> Result<()> {
        let mut t = Tape::inference(&self.store);
        let v = t.constant(x.clone());
        std::hint::black_box(self.attn.forward(&mut t, v, v)?);
        Ok(())
    }

    /// First length where attention is strictly more expensive. The cost
    /// difference changes sign once, so a doubling search then bisection
    /// finds it.
    pub fn crossover(&self) -> u64 {
        let worse = |l: u64| self.attn_flops(l as usize) > self.cmm_flops(l as usize);
        let mut hi = 1u64;
        while !worse(hi) {
            hi *= 2;
        }
        let mut lo = hi / 2;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if worse(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

pub fn validate_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.len() < MIN_POINTS {
        return Err(Error::config(format!("need at least {MIN_POINTS} lengths, got {}", lengths.len())));
    }
    if lengths[0] == 0 || lengths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("lengths must be positive and strictly increasing"));
    }
    Ok(())
}

/// Times both blocks at every length (median over `repeats`, lengths
/// interleaved within each repeat) and checks the FLOPs scaling exactly.
pub fn cmd_bench(lengths: &[usize], d_model: usize, heads: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    validate_lengths(lengths)?;
    let models = BenchModels::new(d_model, heads, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let inputs: Vec<Tensor> = lengths
        .iter()
        .map(|&l| Tensor::new(vec![l, d_model], (0..l * d_model).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect::<Result<_>>()?;

    let mut cmm_ns = vec![Vec::new(); lengths.len()];
    let mut attn_ns = vec![Vec::new(); lengths.len()];
    for _ in 0..repeats.max(1) {
        for (i, x) in inputs.iter().enumerate() {
            let t0 = Instant::now();
            models.run_cmm(x)?;
            cmm_ns[i].push(t0.elapsed().as_nanos());
            let t0 = Instant::now();
            models.run_attn(x)?;
            attn_ns[i].push(t0.elapsed().as_nanos());
        }
    }

    let rows: Vec<BenchRow> = lengths
        .iter()
        .zip(cmm_ns.into_iter().zip(attn_ns))
        .map(|(&length, (c, a))| BenchRow {
            length,
            cmm_ns: median(c),
            attn_ns: median(a),
            cmm_flops: models.cmm_flops(length),
            attn_flops: models.attn_flops(length),
        })
        .collect();
    check_scaling(&models, lengths)?;

    let xs: Vec<f64> = rows.iter().map(|r| r.length as f64).collect();
    let slope = |f: fn(&BenchRow) -> u128| loglog_slope(&xs, &rows.iter().map(|r| f(r).max(1) as f64).collect::<Vec<_>>());
    Ok(BenchReport {
        d_model,
        heads,
        cmm_slope: slope(|r| r.cmm_ns),
        attn_slope: slope(|r| r.attn_ns),
        crossover: models.crossover(),
        rows,
    })
}

/// CMM cost exactly doubles with the length; the attention ratio rises
/// towards, and never exceeds, four.
fn check_scaling(models: &BenchModels, lengths: &[usize]) -> Result<()> {
    let mut last_ratio = 0.0;
    for &l in lengths {
        if models.cmm_flops(2 * l) != 2 * models.cmm_flops(l) {
            return Err(Error::contract(format!("CMM FLOPs not linear at length {l}")));
        }
        let r = models.attn_flops(2 * l) as f64 / models.attn_flops(l) as f64;
        if r <= last_ratio || r > 4.0 {
            return Err(Error::contract(format!("attention FLOPs ratio {r} at length {l}")));
        }
        last_ratio = r;
    }
    Ok(())
}

pub fn write_csv(report: &BenchReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["length", "cmm_ns", "attn_ns", "cmm_flops", "attn_flops"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in &report.rows {
        w.write_record([
            r.length.to_string(),
            r.cmm_ns.to_string(),
            r.attn_ns.to_string(),
            r.cmm_flops.to_string(),
            r.attn_flops.to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
