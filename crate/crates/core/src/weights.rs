//! Named weight containers: a directory holding `manifest.json` and one SBT4
//! file per tensor.
//!
//! Convolution weights are stored as a `kh x kw x c_in x c_out` tensor and
//! biases as `1 x 1 x 1 x c_out`. Batch-norm parameters are one
//! `1 x 1 x 4 x c` tensor holding gamma, beta, running mean and running
//! variance in that order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{ConvParams, FilterBank};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::norm::BnParams;
use crate::sparse::{Backbone, Projection, ResidualUnitParams, SparseStage, StageConfig};
use crate::tensor::{Dims4, Layout, Tensor4D};

pub const MANIFEST: &str = "manifest.json";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerEntry {
    Conv {
        file: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_file: Option<String>,
        params: ConvParams,
    },
    Bn {
        file: String,
        epsilon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Network structure, when the container holds a backbone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneLayout>,
    pub layers: BTreeMap<String, LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneLayout {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
}

/// In-memory weight container.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    pub convs: BTreeMap<String, (FilterBank<f32>, ConvParams)>,
    pub bns: BTreeMap<String, BnParams<f32>>,
    pub backbone: Option<BackboneLayout>,
}

fn file_name(name: &str, suffix: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}{suffix}.sbt4")
}

impl WeightStore {
    pub fn insert_conv(&mut self, name: impl Into<String>, f: FilterBank<f32>, p: ConvParams) {
        self.convs.insert(name.into(), (f, p));
    }

    pub fn insert_bn(&mut self, name: impl Into<String>, bn: BnParams<f32>) {
        self.bns.insert(name.into(), bn);
    }

    pub fn conv(&self, name: &str) -> Result<&(FilterBank<f32>, ConvParams)> {
        self.convs
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("no convolution layer named {name:?}")))
    }

    pub fn bn(&self, name: &str) -> Result<&BnParams<f32>> {
        self.bns
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("no batch-norm layer named {name:?}")))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut layers = BTreeMap::new();
        for (name, (f, p)) in &self.convs {
            let file = file_name(name, "");
            let w = Tensor4D::from_vec(
                Dims4::new(f.kh, f.kw, f.c_in, f.c_out),
                Layout::ChannelsLast,
                f.weights.clone(),
            )?;
            write_tensor(dir.join(&file), &w)?;
            let bias_file = match &f.bias {
                Some(b) => {
                    let bf = file_name(name, ".bias");
                    let t = Tensor4D::from_vec(Dims4::new(1, 1, 1, b.len()), Layout::ChannelsLast, b.clone())?;
                    write_tensor(dir.join(&bf), &t)?;
                    Some(bf)
                }
                None => None,
            };
            layers.insert(
                name.clone(),
                LayerEntry::Conv {
                    file,
                    bias_file,
                    params: *p,
                },
            );
        }
        for (name, bn) in &self.bns {
            if layers.contains_key(name) {
                return Err(Error::Manifest(format!("layer name {name:?} used twice")));
            }
            let file = file_name(name, "");
            let c = bn.channels();
            let mut data = Vec::with_capacity(4 * c);
            for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                data.extend_from_slice(v);
            }
            write_tensor(dir.join(&file), &Tensor4D::from_vec(Dims4::new(1, 1, 4, c), Layout::ChannelsLast, data)?)?;
            layers.insert(
                name.clone(),
                LayerEntry::Bn {
                    file,
                    epsilon: bn.epsilon as f64,
                },
            );
        }
        let manifest = Manifest {
            version: VERSION,
            backbone: self.backbone.clone(),
            layers,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.version != VERSION {
            return Err(Error::Manifest(format!("unsupported manifest version {}", manifest.version)));
        }
        let mut store = WeightStore {
            backbone: manifest.backbone,
            ..Default::default()
        };
        for (name, entry) in manifest.layers {
            match entry {
                LayerEntry::Conv { file, bias_file, params } => {
                    let w: Tensor4D<f32> = read_tensor(dir.join(&file))?;
                    let d = w.dims();
                    if w.layout() != Layout::ChannelsLast {
                        return Err(Error::Manifest(format!("{file}: filter tensors must be channels-last")));
                    }
                    let bias = match bias_file {
                        Some(bf) => {
                            let b: Tensor4D<f32> = read_tensor(dir.join(&bf))?;
                            Some(b.into_vec())
                        }
                        None => None,
                    };
                    let f = FilterBank::new((d.n, d.h, d.w, d.c), w.into_vec(), bias)
                        .map_err(|e| Error::Manifest(format!("layer {name:?}: {e}")))?;
                    f.check_against(&params, f.c_in)
                        .map_err(|e| Error::Manifest(format!("layer {name:?}: {e}")))?;
                    store.convs.insert(name, (f, params));
                }
                LayerEntry::Bn { file, epsilon } => {
                    let t: Tensor4D<f32> = read_tensor(dir.join(&file))?;
                    let d = t.dims();
                    if (d.n, d.h, d.w) != (1, 1, 4) {
                        return Err(Error::Manifest(format!(
                            "{file}: batch-norm tensor must be 1x1x4xC, found {d}"
                        )));
                    }
                    let c = d.c;
                    let v = t.into_vec();
                    let bn = BnParams::new(
                        v[..c].to_vec(),
                        v[c..2 * c].to_vec(),
                        v[2 * c..3 * c].to_vec(),
                        v[3 * c..].to_vec(),
                        epsilon as f32,
                    )
                    .map_err(|e| Error::Manifest(format!("layer {name:?}: {e}")))?;
                    store.bns.insert(name, bn);
                }
            }
        }
        Ok(store)
    }
}

fn put_projection(store: &mut WeightStore, name: &str, p: &Projection<f32>) {
    store.insert_conv(format!("{name}.conv"), p.conv.clone(), p.params);
    store.insert_bn(format!("{name}.bn"), p.bn.clone());
}

fn get_projection(store: &WeightStore, name: &str) -> Result<Projection<f32>> {
    let (conv, params) = store.conv(&format!("{name}.conv"))?.clone();
    Ok(Projection {
        conv,
        params,
        bn: store.bn(&format!("{name}.bn"))?.clone(),
    })
}

impl Backbone<f32> {
    pub fn to_weights(&self, in_channels: usize) -> WeightStore {
        let mut s = WeightStore {
            backbone: Some(BackboneLayout {
                in_channels,
                stages: self.stages.iter().map(|st| st.config).collect(),
            }),
            ..Default::default()
        };
        for (i, p) in self.stem.iter().enumerate() {
            put_projection(&mut s, &format!("stem{i}"), p);
        }
        for (si, st) in self.stages.iter().enumerate() {
            if let Some(p) = &st.projection {
                put_projection(&mut s, &format!("stage{si}.proj"), p);
            }
            for (ui, u) in st.units.iter().enumerate() {
                let pre = format!("stage{si}.unit{ui}");
                let c1 = ConvParams::new((1, 1), (1, 1), crate::conv::Padding::Valid, u.conv1.c_out).unwrap();
                let c2 = ConvParams::new((3, 3), (1, 1), crate::conv::Padding::Same, u.conv2.c_out).unwrap();
                let c3 = ConvParams::new((1, 1), (1, 1), crate::conv::Padding::Valid, u.conv3.c_out).unwrap();
                s.insert_conv(format!("{pre}.conv1"), u.conv1.clone(), c1);
                s.insert_conv(format!("{pre}.conv2"), u.conv2.clone(), c2);
                s.insert_conv(format!("{pre}.conv3"), u.conv3.clone(), c3);
                s.insert_bn(format!("{pre}.bn1"), u.bn1.clone());
                s.insert_bn(format!("{pre}.bn2"), u.bn2.clone());
                s.insert_bn(format!("{pre}.bn3"), u.bn3.clone());
            }
        }
        s
    }

    /// Rebuilds a backbone from a container written by [`Backbone::to_weights`].
    /// Units are taken to be pre-activation.
    pub fn from_weights(store: &WeightStore) -> Result<(Self, usize)> {
        let layout = store
            .backbone
            .as_ref()
            .ok_or_else(|| Error::Manifest("container has no backbone layout".into()))?;
        let mut stem = Vec::new();
        while store.convs.contains_key(&format!("stem{}.conv", stem.len())) {
            stem.push(get_projection(store, &format!("stem{}", stem.len()))?);
        }
        let mut stages = Vec::with_capacity(layout.stages.len());
        for (si, cfg) in layout.stages.iter().enumerate() {
            cfg.validate()?;
            let projection = if cfg.needs_projection() {
                Some(get_projection(store, &format!("stage{si}.proj"))?)
            } else {
                None
            };
            let mut units = Vec::with_capacity(cfg.units);
            for ui in 0..cfg.units {
                let pre = format!("stage{si}.unit{ui}");
                let u = ResidualUnitParams {
                    conv1: store.conv(&format!("{pre}.conv1"))?.0.clone(),
                    conv2: store.conv(&format!("{pre}.conv2"))?.0.clone(),
                    conv3: store.conv(&format!("{pre}.conv3"))?.0.clone(),
                    bn1: store.bn(&format!("{pre}.bn1"))?.clone(),
                    bn2: store.bn(&format!("{pre}.bn2"))?.clone(),
                    bn3: store.bn(&format!("{pre}.bn3"))?.clone(),
                    pre_activation: true,
                };
                u.validate().map_err(|e| Error::Manifest(format!("{pre}: {e}")))?;
                units.push(u);
            }
            stages.push(SparseStage {
                config: *cfg,
                projection,
                units,
            });
        }
        Ok((Backbone { stem, stages }, layout.in_channels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backbone_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfgs: Vec<StageConfig> = Backbone::<f32>::demo_configs()
            .into_iter()
            .map(|mut c| {
                c.channels = (c.channels.0 / 8, 2, c.channels.2 / 8);
                c
            })
            .collect();
        let net = Backbone::<f32>::build(3, &cfgs, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.to_weights(3).save(dir.path()).unwrap();
        let (back, c) = Backbone::from_weights(&WeightStore::load(dir.path()).unwrap()).unwrap();
        assert_eq!(c, 3);
        assert_eq!(back, net);
    }

    #[test]
    fn missing_layer_is_named() {
        let s = WeightStore::default();
        assert!(s.conv("stage0.unit0.conv1").unwrap_err().to_string().contains("stage0.unit0.conv1"));
    }
}
