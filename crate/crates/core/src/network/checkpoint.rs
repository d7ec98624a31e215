//! Plain-text checkpoint format, version 1.
//!
//! ```text
//! dropdisc-checkpoint,1
//! input_dim,2
//! dropout,0.5                         (only when a discriminator is stored)
//! array,extractor.0.weight,64,2
//! <one comma-separated line per row>
//! array,extractor.0.bias,1,64
//! ...
//! ```
//!
//! Arrays are named `<network>.<layer>.<weight|bias>` with `network` one of
//! `extractor`, `classifier`, `discriminator`. Weights are `out × in`.
//! Values use the shortest representation that parses back to the same
//! `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Classifier, Discriminator, Extractor, Model, Stack};
use crate::diffcore::{DenseLayer, Matrix};
use crate::error::{Error, Result};

const MAGIC: &str = "dropdisc-checkpoint";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    writeln!(w, "{MAGIC},{VERSION}").map_err(io)?;
    writeln!(w, "input_dim,{}", model.extractor.input_dim()).map_err(io)?;
    if let Some(d) = &model.discriminator {
        writeln!(w, "dropout,{}", d.dropout()).map_err(io)?;
    }
    let mut nets: Vec<(&str, &Stack)> = vec![
        ("extractor", model.extractor.stack()),
        ("classifier", model.classifier.stack()),
    ];
    if let Some(d) = &model.discriminator {
        nets.push(("discriminator", d.stack()));
    }
    for (name, stack) in nets {
        for (i, layer) in stack.layers().iter().enumerate() {
            write_array(&mut w, &format!("{name}.{i}.weight"), layer.weights()).map_err(io)?;
            let bias = Matrix::new(1, layer.out_dim(), layer.bias().to_vec())?;
            write_array(&mut w, &format!("{name}.{i}.bias"), &bias).map_err(io)?;
        }
    }
    Ok(())
}

fn write_array<W: Write>(w: &mut W, name: &str, m: &Matrix) -> std::io::Result<()> {
    writeln!(w, "array,{name},{},{}", m.rows(), m.cols())?;
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Model> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
    let mut next = |what: &str| -> Result<(u64, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((n, Err(e))) => Err(Error::Parse {
                line: n,
                message: e.to_string(),
            }),
            None => Err(Error::Parse {
                line: 0,
                message: format!("unexpected end of checkpoint, expected {what}"),
            }),
        }
    };

    let (n, header) = next("header")?;
    let version = header
        .strip_prefix(MAGIC)
        .and_then(|s| s.strip_prefix(','))
        .ok_or_else(|| parse_err(n, "not a dropdisc checkpoint"))?;
    if version.trim() != VERSION.to_string() {
        return Err(parse_err(n, format!("unsupported checkpoint version {version}")));
    }

    let mut input_dim = None;
    let mut dropout = None;
    let mut arrays: BTreeMap<String, Matrix> = BTreeMap::new();
    while let Ok((n, line)) = next("array") {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match fields[0] {
            "input_dim" if fields.len() == 2 => input_dim = Some(parse_num::<usize>(n, fields[1])?),
            "dropout" if fields.len() == 2 => dropout = Some(parse_num::<f64>(n, fields[1])?),
            "array" if fields.len() == 4 => {
                let name = fields[1].to_string();
                let rows = parse_num::<usize>(n, fields[2])?;
                let cols = parse_num::<usize>(n, fields[3])?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (rn, row) = next("array row")?;
                    let vals = row
                        .split(',')
                        .map(|v| parse_num::<f64>(rn, v))
                        .collect::<Result<Vec<_>>>()?;
                    if vals.len() != cols {
                        return Err(parse_err(
                            rn,
                            format!("{name}: expected {cols} values, found {}", vals.len()),
                        ));
                    }
                    data.extend(vals);
                }
                arrays.insert(name, Matrix::new(rows, cols, data)?);
            }
            other => return Err(parse_err(n, format!("unexpected record `{other}`"))),
        }
    }

    let input_dim = input_dim.ok_or_else(|| parse_err(0, "missing input_dim"))?;
    let extractor = Extractor::from_layers(input_dim, take_layers(&mut arrays, "extractor")?)?;
    let classifier = Classifier::from_layers(take_layers(&mut arrays, "classifier")?)?;
    let disc_layers = take_layers(&mut arrays, "discriminator")?;
    let discriminator = if disc_layers.is_empty() {
        None
    } else {
        let d = dropout.ok_or_else(|| parse_err(0, "discriminator stored without dropout rate"))?;
        Some(Discriminator::from_layers(disc_layers, d)?)
    };
    if let Some(name) = arrays.keys().next() {
        return Err(parse_err(0, format!("unrecognized array `{name}`")));
    }
    if classifier.feature_dim() != extractor.feature_dim() {
        return Err(Error::validation(format!(
            "classifier expects {} features, extractor produces {}",
            classifier.feature_dim(),
            extractor.feature_dim()
        )));
    }
    Ok(Model {
        extractor,
        classifier,
        discriminator,
    })
}

fn take_layers(arrays: &mut BTreeMap<String, Matrix>, net: &str) -> Result<Vec<DenseLayer>> {
    let mut layers = Vec::new();
    for i in 0.. {
        let Some(w) = arrays.remove(&format!("{net}.{i}.weight")) else {
            break;
        };
        let b = arrays
            .remove(&format!("{net}.{i}.bias"))
            .ok_or_else(|| parse_err(0, format!("{net}.{i}.bias missing")))?;
        layers.push(DenseLayer::new(w, b.into_data())?);
    }
    Ok(layers)
}

fn parse_num<T: std::str::FromStr>(line: u64, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("cannot parse `{s}`")))
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Rng;
    use crate::network::Topology;

    #[test]
    fn round_trip_is_exact() {
        let topo = Topology {
            input_dim: 2,
            extractor: vec![5, 3],
            discriminator: vec![4],
            n_classes: 3,
        };
        for dropout in [None, Some(0.5)] {
            let model = Model::new(&topo, dropout, &mut Rng::new(1)).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&model, &mut buf).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, model);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(
            read_checkpoint("step,epoch\n1,2\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn reports_bad_row_line() {
        let text = "dropdisc-checkpoint,1\ninput_dim,1\narray,extractor.0.weight,1,1\nabc\n";
        assert!(matches!(
            read_checkpoint(text.as_bytes()),
            Err(Error::Parse { line: 4, .. })
        ));
    }
}
