use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::checkpoint::{CheckpointWriter, DtypePolicy, RawTensor, WeightMap};
use crate::error::{Error, Result};

/// Where merged tensors go.
#[derive(Debug, Clone)]
pub enum Output {
    Memory,
    File { path: PathBuf, strict_finite: bool },
}

/// Build an output with the same tensor names and shapes as `base`. Tensors
/// are produced by `make` in parallel chunks and emitted strictly in canonical
/// order, so results do not depend on the thread count. For file output at
/// most one chunk of tensors is resident at a time.
pub(crate) fn produce<F>(
    base: &WeightMap,
    policy: DtypePolicy,
    metadata: BTreeMap<String, String>,
    output: &Output,
    make: F,
) -> Result<Option<WeightMap>>
where
    F: Fn(&str) -> Result<RawTensor> + Sync,
{
    let names: Vec<&str> = base.names().collect();
    let chunk = rayon::current_num_threads().max(1);
    match output {
        Output::Memory => {
            let mut out = WeightMap::new();
            *out.metadata_mut() = metadata;
            for group in names.chunks(chunk) {
                let made: Vec<RawTensor> = group.par_iter().map(|n| make(n)).collect::<Result<_>>()?;
                for (name, raw) in group.iter().zip(made) {
                    out.insert_raw(*name, raw.convert(policy.resolve(raw.dtype))?);
                }
            }
            Ok(Some(out))
        }
        Output::File { path, strict_finite } => {
            let layout = names
                .iter()
                .map(|n| Ok((n.to_string(), policy.resolve(base.dtype(n)?), base.shape(n)?.to_vec())))
                .collect::<Result<Vec<_>>>()?;
            let mut writer = CheckpointWriter::create(path, layout, &metadata, *strict_finite)?;
            for group in names.chunks(chunk) {
                let made: Vec<RawTensor> = group.par_iter().map(|n| make(n)).collect::<Result<_>>()?;
                for (name, raw) in group.iter().zip(made) {
                    writer.write_tensor(name, &raw)?;
                }
            }
            writer.finish()?;
            Ok(None)
        }
    }
}

pub(crate) fn expect_memory(out: Option<WeightMap>) -> WeightMap {
    out.expect("memory output yields a map")
}

pub(crate) fn shape_check(name: &str, want: &[usize], got: &[usize]) -> Result<()> {
    if want != got {
        return Err(Error::Consistency(format!(
            "{name}: expected shape {want:?}, found {got:?}"
        )));
    }
    Ok(())
}
