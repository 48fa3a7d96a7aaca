//! Training-loop plumbing shared by the three models.

use std::io::Write;
use std::path::Path;

use diffcore::{accumulate_grads, Adam, BufferUpdate, Checkpoint, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::emodel::FrequencyGrid;
use crate::error::{Error, Result};
use crate::nets::CurveArch;

/// Shuffled minibatches for one epoch. A trailing batch with a single
/// sample is dropped because batch statistics need at least two.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    idx.chunks(batch.max(1))
        .filter(|c| c.len() >= 2 || n == 1)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Linear warm-up `weight · min(1, epoch / ramp)` (0-based epochs).
pub fn annealed(weight: f64, epoch: usize, ramp: usize) -> f64 {
    if ramp == 0 {
        weight
    } else {
        weight * (epoch as f64 / ramp as f64).min(1.0)
    }
}

/// Deterministic stream derivation for nested seeds (splitmix64 finalizer).
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ stream
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn check_finite(epoch: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            epoch,
            what: what.to_string(),
        })
    }
}

/// Backward pass, one optimizer step, gradient reset and buffer refresh.
pub fn apply_step(
    store: &mut ParamStore,
    graph: &Graph,
    loss: Var,
    updates: Vec<BufferUpdate>,
    opt: &mut Adam,
) -> Result<()> {
    accumulate_grads(graph, loss, store)?;
    opt.step(store)?;
    store.zero_grads();
    store.apply_buffer_updates(updates);
    Ok(())
}

/// One row of a training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub values: Vec<(&'static str, f64)>,
}

impl EpochLog {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }
}

pub fn write_history<W: Write>(mut w: W, history: &[EpochLog], config_hash: &str) -> Result<()> {
    writeln!(w, "# config_hash={config_hash}")?;
    if let Some(first) = history.first() {
        let cols: Vec<&str> = first.values.iter().map(|(k, _)| *k).collect();
        writeln!(w, "epoch,{}", cols.join(","))?;
        for row in history {
            let vals: Vec<String> = row.values.iter().map(|(_, v)| format!("{v:.8e}")).collect();
            writeln!(w, "{},{}", row.epoch, vals.join(","))?;
        }
    }
    Ok(())
}

pub fn save_history(path: &Path, history: &[EpochLog], config_hash: &str) -> Result<()> {
    write_history(
        std::io::BufWriter::new(std::fs::File::create(path)?),
        history,
        config_hash,
    )
}

pub(crate) fn meta_str<'a>(ck: &'a Checkpoint, key: &str) -> Result<&'a str> {
    ck.meta(key)
        .ok_or_else(|| Error::Missing(format!("checkpoint metadata `{key}`")))
}

pub(crate) fn meta_parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    meta_str(ck, key)?
        .parse()
        .map_err(|_| Error::Config(format!("checkpoint metadata `{key}` is malformed")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split_usize(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.parse().map_err(|_| Error::Config(format!("bad channel list `{s}`"))))
        .collect()
}

pub(crate) fn put_arch(ck: &mut Checkpoint, arch: &CurveArch) {
    ck.set_meta("arch.n", arch.n);
    ck.set_meta("arch.enc_channels", join(&arch.enc_channels));
    ck.set_meta("arch.enc_kernel", arch.enc_kernel);
    ck.set_meta("arch.dec_channels", join(&arch.dec_channels));
    ck.set_meta("arch.latent", arch.latent);
    ck.set_meta("arch.dropout", format!("{:?}", arch.dropout));
}

pub(crate) fn get_arch(ck: &Checkpoint) -> Result<CurveArch> {
    Ok(CurveArch {
        n: meta_parse(ck, "arch.n")?,
        enc_channels: split_usize(meta_str(ck, "arch.enc_channels")?)?,
        enc_kernel: meta_parse(ck, "arch.enc_kernel")?,
        dec_channels: split_usize(meta_str(ck, "arch.dec_channels")?)?,
        latent: meta_parse(ck, "arch.latent")?,
        dropout: meta_parse(ck, "arch.dropout")?,
    })
}

pub(crate) fn put_grid(ck: &mut Checkpoint, grid: &FrequencyGrid) {
    ck.set_meta("grid.f_min", format!("{:?}", grid.f_min));
    ck.set_meta("grid.f_max", format!("{:?}", grid.f_max));
    ck.set_meta("grid.n", grid.n);
}

pub(crate) fn get_grid(ck: &Checkpoint) -> Result<FrequencyGrid> {
    FrequencyGrid::new(
        meta_parse(ck, "grid.f_min")?,
        meta_parse(ck, "grid.f_max")?,
        meta_parse(ck, "grid.n")?,
    )
}

/// Checks that a checkpoint was written by the expected model kind.
pub(crate) fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    match ck.meta("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Config(format!(
            "expected a {kind} checkpoint, found {}",
            other.unwrap_or("an untagged one")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_and_drop_singletons() {
        let b = epoch_batches(10, 3, 0, 0);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all.len(), 9);
        assert_eq!(epoch_batches(10, 3, 0, 0), b);
        assert_ne!(epoch_batches(10, 3, 0, 1), b);
        assert_eq!(epoch_batches(10, 5, 0, 0).concat().len(), 10);
    }

    #[test]
    fn anneal_schedule() {
        assert_eq!(annealed(0.016, 0, 100), 0.0);
        assert!((annealed(0.016, 50, 100) - 0.008).abs() < 1e-15);
        assert_eq!(annealed(0.016, 100, 100), 0.016);
        assert_eq!(annealed(0.016, 250, 100), 0.016);
        assert_eq!(annealed(0.016, 0, 0), 0.016);
    }

    #[test]
    fn arch_and_grid_metadata_round_trip() {
        let mut ck = Checkpoint::new();
        let arch = CurveArch::default();
        let grid = FrequencyGrid::new(1.5, 9.25, 77).unwrap();
        put_arch(&mut ck, &arch);
        put_grid(&mut ck, &grid);
        assert_eq!(get_arch(&ck).unwrap(), arch);
        assert_eq!(get_grid(&ck).unwrap(), grid);
    }
}
