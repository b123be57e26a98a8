use std::collections::HashMap;

use ndtensor::{Element, Tape, Tensor, Var};
use rand::RngCore;

use super::{ModelConfig, ModelError, Result, SpatialSharing, Variant};

/// Named weight tensors in a fixed creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// How a parameter is initialized.
enum Init {
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Name, shape and initializer of every parameter of `config`, in order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (n, d, ff) = (config.token_joints(), config.embed_dim, config.ff_size);
    let m_in = config.token_dim();
    let mut out = vec![
        ("embed.weight".to_string(), vec![n, m_in, d], Init::FanIn(m_in)),
        ("embed.bias".to_string(), vec![n, 1, d], Init::Zeros),
    ];
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    for l in 0..config.layers {
        for w in ["query", "key", "value", "output"] {
            push(format!("layer{l}.temporal.{w}"), vec![n, d, d], Init::FanIn(d));
        }
        if config.variant == Variant::St {
            let (q_sep, kv_sep) = match config.spatial_sharing {
                SpatialSharing::QuerySeparate => (true, false),
                SpatialSharing::AllSeparate => (true, true),
                SpatialSharing::AllShared => (false, false),
            };
            let shape = |sep: bool| if sep { vec![n, d, d] } else { vec![d, d] };
            push(format!("layer{l}.spatial.query"), shape(q_sep), Init::FanIn(d));
            push(format!("layer{l}.spatial.key"), shape(kv_sep), Init::FanIn(d));
            push(format!("layer{l}.spatial.value"), shape(kv_sep), Init::FanIn(d));
            push(format!("layer{l}.spatial.output"), vec![d, d], Init::FanIn(d));
        }
        let branches: &[&str] = if config.ff_per_branch && config.variant == Variant::St {
            &["temporal", "spatial"]
        } else {
            &[""]
        };
        for b in branches {
            let sfx = if b.is_empty() { String::new() } else { format!("_{b}") };
            push(format!("layer{l}.ff{sfx}.w1"), vec![d, ff], Init::FanIn(d));
            push(format!("layer{l}.ff{sfx}.b1"), vec![ff], Init::Zeros);
            push(format!("layer{l}.ff{sfx}.w2"), vec![ff, d], Init::FanIn(ff));
            push(format!("layer{l}.ff{sfx}.b2"), vec![d], Init::Zeros);
            push(format!("layer{l}.norm{sfx}.gain"), vec![d], Init::Ones);
            push(format!("layer{l}.norm{sfx}.bias"), vec![d], Init::Zeros);
        }
    }
    out.push(("output.weight".into(), vec![n, d, m_in], Init::Zeros));
    out.push(("output.bias".into(), vec![n, 1, m_in], Init::Zeros));
    out
}

impl<T: Element> ModelParameters<T> {
    /// Projection weights uniform in `±sqrt(1 / fan_in)`, biases zero, layer
    /// norm gains one and the pose output projection zero.
    pub fn init(config: &ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(config) {
            let t = match init {
                Init::FanIn(fan_in) => Tensor::uniform(shape, (1.0 / fan_in as f64).sqrt(), rng)?,
                Init::Zeros => Tensor::zeros(shape)?,
                Init::Ones => Tensor::ones(shape)?,
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::from_named(names, tensors))
    }

    fn from_named(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParameters<U> {
        ModelParameters::from_named(self.names.clone(), self.tensors.iter().map(|t| t.cast()).collect())
    }

    /// Records every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundParams<'_>> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect::<ndtensor::Result<Vec<_>>>()?;
        Ok(BoundParams {
            index: &self.index,
            vars,
        })
    }

    /// Addresses existing tape variables, one per tensor in parameter order,
    /// by parameter name.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundParams<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(ModelError::Config(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        Ok(BoundParams {
            index: &self.index,
            vars,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

impl ModelParameters<f32> {
    pub fn write<W: std::io::Write>(&self, w: W) -> Result<()> {
        let named: Vec<(&str, &Tensor<f32>)> = self.names.iter().map(|n| n.as_str()).zip(&self.tensors).collect();
        ndtensor::io::write_tensors(w, &named)?;
        Ok(())
    }

    /// Reads weights and checks that names and shapes match `config`.
    pub fn read<R: std::io::Read>(r: R, config: &ModelConfig) -> Result<Self> {
        let stored = ndtensor::io::read_tensors(r)?;
        let expected = layout(config);
        if stored.len() != expected.len() {
            return Err(ModelError::Format(format!(
                "{} tensors stored, configuration needs {}",
                stored.len(),
                expected.len()
            )));
        }
        for ((name, t), (ename, eshape, _)) in stored.iter().zip(&expected) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(ModelError::Format(format!(
                    "tensor {name} {:?} does not match expected {ename} {eshape:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = stored.into_iter().unzip();
        Ok(Self::from_named(names, tensors))
    }
}

/// Tape handles of a parameter set, addressable by name.
#[derive(Debug)]
pub struct BoundParams<'a> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
    }

    /// Handles in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
