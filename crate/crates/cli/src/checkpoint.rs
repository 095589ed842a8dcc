//! Parameter checkpoints.
//!
//! Layout: the magic `HMC1\n`; one line echoing the network configuration;
//! a line `params=N`; N manifest lines `name ndim d0 ... dk`; then the N
//! parameter tensors as concatenated containers in manifest order. The
//! manifest is fully determined by the configuration, so a loader verifies
//! every name and shape against what the configuration implies and can
//! report exactly which parameter a corrupt file breaks on. Save → load →
//! save reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use hmseg_core::network::{ConvNormParams, ModelParams, NetworkConfig};
use hmseg_core::Tensor;

use crate::container;

pub const MAGIC: &[u8; 5] = b"HMC1\n";

fn config_line(c: &NetworkConfig) -> String {
    let blocks = c
        .residual_blocks
        .iter()
        .map(|&(n, d)| format!("{n}x{d}"))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "config n_modalities={} n_classes={} base_channels={} kernel_size={} blocks={}",
        c.n_modalities, c.n_classes, c.base_channels, c.kernel_size, blocks
    )
}

fn parse_config_line(line: &str) -> Result<NetworkConfig> {
    let rest = line
        .strip_prefix("config ")
        .with_context(|| format!("expected a config line, found {line:?}"))?;
    let mut n_modalities = None;
    let mut n_classes = None;
    let mut base_channels = None;
    let mut kernel_size = None;
    let mut blocks = None;
    for pair in rest.split_whitespace() {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("malformed config entry {pair:?}"))?;
        match key {
            "n_modalities" => n_modalities = Some(value.parse().context("n_modalities")?),
            "n_classes" => n_classes = Some(value.parse().context("n_classes")?),
            "base_channels" => base_channels = Some(value.parse().context("base_channels")?),
            "kernel_size" => kernel_size = Some(value.parse().context("kernel_size")?),
            "blocks" => blocks = Some(parse_blocks(value)?),
            other => bail!("unknown config entry {other:?}"),
        }
    }
    let config = NetworkConfig {
        n_modalities: n_modalities.context("config line missing n_modalities")?,
        n_classes: n_classes.context("config line missing n_classes")?,
        base_channels: base_channels.context("config line missing base_channels")?,
        kernel_size: kernel_size.context("config line missing kernel_size")?,
        residual_blocks: blocks.context("config line missing blocks")?,
    };
    config
        .validate()
        .context("checkpoint configuration rejected")?;
    Ok(config)
}

pub(crate) fn parse_blocks(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|part| {
            let (n, d) = part
                .split_once('x')
                .with_context(|| format!("block {part:?} must look like 3x2"))?;
            Ok((
                n.parse()
                    .with_context(|| format!("block {part:?} conv count"))?,
                d.parse()
                    .with_context(|| format!("block {part:?} dilation"))?,
            ))
        })
        .collect()
}

/// Parameter names and shapes implied by a configuration, in the order the
/// tensors are stored.
pub fn expected_layout(config: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let f = config.base_channels;
    let k = config.kernel_size;
    let mut out = Vec::new();
    for m in 0..config.n_modalities {
        out.push((format!("frontend{m}.kernel"), vec![f, 1, k, k]));
        out.push((format!("frontend{m}.scale"), vec![f]));
        out.push((format!("frontend{m}.shift"), vec![f]));
    }
    for (b, &(n_convs, _)) in config.residual_blocks.iter().enumerate() {
        for i in 0..n_convs {
            out.push((format!("trunk{b}.conv{i}.kernel"), vec![f, f, k, k]));
            out.push((format!("trunk{b}.conv{i}.scale"), vec![f]));
            out.push((format!("trunk{b}.conv{i}.shift"), vec![f]));
        }
    }
    out.push(("head.kernel".to_string(), vec![config.n_classes, f, 1, 1]));
    out
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let named = params.named_tensors();
    w.write_all(MAGIC)?;
    writeln!(w, "{}", config_line(&params.config))?;
    writeln!(w, "params={}", named.len())?;
    for (name, tensor) in &named {
        let mut line = format!("{name} {}", tensor.shape().len());
        for d in tensor.shape() {
            line.push(' ');
            line.push_str(&d.to_string());
        }
        writeln!(w, "{line}")?;
    }
    for (_, tensor) in &named {
        container::write_tensor(&mut w, tensor)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = BufReader::new(file);
    load_from(&mut r).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Load and additionally require the checkpoint to carry exactly the given
/// configuration.
pub fn load_matching(path: &Path, expected: &NetworkConfig) -> Result<ModelParams> {
    let params = load(path)?;
    if &params.config != expected {
        bail!(
            "checkpoint {} was trained with a different configuration:\n  found    {}\n  expected {}",
            path.display(),
            config_line(&params.config),
            config_line(expected)
        );
    }
    Ok(params)
}

fn load_from<R: BufRead>(r: &mut R) -> Result<ModelParams> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .context("reading checkpoint magic")?;
    if &magic != MAGIC {
        bail!("bad checkpoint magic {:?}", String::from_utf8_lossy(&magic));
    }
    let config = parse_config_line(&read_line(r, "config line")?)?;
    let layout = expected_layout(&config);

    let count_line = read_line(r, "parameter count")?;
    let count: usize = count_line
        .strip_prefix("params=")
        .with_context(|| format!("expected params=N, found {count_line:?}"))?
        .parse()
        .context("parameter count")?;
    if count != layout.len() {
        bail!(
            "checkpoint lists {count} parameters, configuration implies {}",
            layout.len()
        );
    }

    for (i, (name, shape)) in layout.iter().enumerate() {
        let line = read_line(r, "parameter manifest")?;
        let mut tokens = line.split_whitespace();
        let found_name = tokens.next().unwrap_or_default();
        if found_name != name {
            bail!("parameter {i}: expected `{name}`, manifest lists `{found_name}`");
        }
        let dims: Vec<usize> = tokens
            .map(|t| {
                t.parse()
                    .with_context(|| format!("parameter `{name}` manifest dims"))
            })
            .collect::<Result<_>>()?;
        let (ndim, rest) = dims
            .split_first()
            .with_context(|| format!("parameter `{name}` manifest has no shape"))?;
        if *ndim != rest.len() || rest != shape.as_slice() {
            bail!(
                "parameter `{name}`: manifest shape {rest:?} does not match the configured {shape:?}"
            );
        }
    }

    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in &layout {
        let c = container::read(r).with_context(|| format!("reading parameter `{name}`"))?;
        if &c.shape != shape {
            bail!(
                "parameter `{name}`: payload shape {:?} does not match the configured {shape:?}",
                c.shape
            );
        }
        let tensor = c
            .into_tensor()
            .with_context(|| format!("parameter `{name}`"))?;
        tensors.push(tensor.with_requires_grad());
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        bail!("trailing bytes after the last parameter");
    }

    Ok(assemble(config, tensors))
}

fn read_line<R: BufRead>(r: &mut R, what: &str) -> Result<String> {
    let mut line = String::new();
    let n = r
        .by_ref()
        .take(4096)
        .read_line(&mut line)
        .with_context(|| format!("reading checkpoint {what}"))?;
    if n == 0 {
        bail!("checkpoint ends before its {what}");
    }
    if !line.ends_with('\n') {
        bail!("checkpoint {what} unterminated");
    }
    line.pop();
    Ok(line)
}

fn assemble(config: NetworkConfig, tensors: Vec<Tensor>) -> ModelParams {
    let mut it = tensors.into_iter();
    let mut next_triple = || ConvNormParams {
        kernel: it.next().expect("layout counted"),
        scale: it.next().expect("layout counted"),
        shift: it.next().expect("layout counted"),
    };
    let frontends = (0..config.n_modalities).map(|_| next_triple()).collect();
    let trunk = config
        .residual_blocks
        .iter()
        .map(|&(n_convs, _)| (0..n_convs).map(|_| next_triple()).collect())
        .collect();
    let head_kernel = it.next().expect("layout counted");
    ModelParams {
        config,
        frontends,
        trunk,
        head_kernel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hmseg_core::network::init_params;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            n_modalities: 2,
            n_classes: 4,
            base_channels: 3,
            residual_blocks: vec![(2, 1), (1, 2)],
            kernel_size: 3,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(&tiny_config(), 11).unwrap();
        let a = dir.path().join("a.hmc1");
        let b = dir.path().join("b.hmc1");
        save(&a, &params).unwrap();
        let loaded = load(&a).unwrap();
        save(&b, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(loaded.config, params.config);
        for ((name_a, t_a), (_, t_b)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(t_a.shape(), t_b.shape(), "{name_a}");
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t_a), bits(&t_b), "{name_a}");
        }
    }

    #[test]
    fn layout_matches_initialized_parameters() {
        let config = tiny_config();
        let params = init_params(&config, 0).unwrap();
        let named = params.named_tensors();
        let layout = expected_layout(&config);
        assert_eq!(named.len(), layout.len());
        for ((name, tensor), (expected_name, expected_shape)) in named.iter().zip(&layout) {
            assert_eq!(name, expected_name);
            assert_eq!(tensor.shape(), expected_shape.as_slice());
        }
    }

    #[test]
    fn truncation_names_the_broken_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hmc1");
        let params = init_params(&tiny_config(), 3).unwrap();
        save(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // drop the final tensor's tail: the head kernel payload breaks
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = format!("{:#}", load(&path).unwrap_err());
        assert!(err.contains("head.kernel"), "{err}");
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn mismatched_configuration_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hmc1");
        save(&path, &init_params(&tiny_config(), 5).unwrap()).unwrap();
        let mut other = tiny_config();
        other.base_channels = 8;
        let err = load_matching(&path, &other).unwrap_err();
        assert!(err.to_string().contains("different configuration"), "{err}");
        assert!(load_matching(&path, &tiny_config()).is_ok());
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.hmc1");
        save(&path, &init_params(&tiny_config(), 5).unwrap()).unwrap();
        let text = std::fs::read(&path).unwrap();
        // corrupt the first manifest line's name
        let tampered =
            String::from_utf8_lossy(&text).replacen("frontend0.kernel 4", "frontend9.kernel 4", 1);
        std::fs::write(&path, tampered.as_bytes()).unwrap();
        let err = load(&path).unwrap_err();
        assert!(
            format!("{err:#}").contains("frontend0.kernel"),
            "error should name the expected parameter: {err:#}"
        );
    }

    #[test]
    fn config_line_roundtrips() {
        let config = NetworkConfig::default();
        assert_eq!(parse_config_line(&config_line(&config)).unwrap(), config);
        let tiny = tiny_config();
        assert_eq!(parse_config_line(&config_line(&tiny)).unwrap(), tiny);
    }
}
