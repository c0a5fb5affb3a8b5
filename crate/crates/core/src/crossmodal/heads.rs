use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Linear, Params, Scalar};

pub const JOINT_DIM: usize = 128;

/// Which domain-specific branch feeds the shared layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Vector,
    Raster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadsConfig {
    pub vector_dim: usize,
    pub raster_dim: usize,
    pub hidden: usize,
    pub joint_dim: usize,
    pub n_classes: usize,
}

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.vector_dim, self.raster_dim, self.hidden, self.joint_dim];
        if dims.contains(&0) || self.n_classes < 2 {
            return Err(Error::Config(format!("invalid joint head shape {self:?}")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("vector_dim".into(), self.vector_dim.to_string()),
            ("raster_dim".into(), self.raster_dim.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("joint_dim".into(), self.joint_dim.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
        ]
    }

    pub fn from_kv(kv: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("joint heads: missing {k}")))?
                .parse()
                .map_err(|_| Error::Format(format!("joint heads: bad {k}")))
        };
        let c = HeadsConfig {
            vector_dim: num("vector_dim")?,
            raster_dim: num("raster_dim")?,
            hidden: num("hidden")?,
            joint_dim: num("joint_dim")?,
            n_classes: num("n_classes")?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Four dense layers per path: two domain-specific (`F_V` or `F_R`) then two
/// shared (`F_S`). Hidden layers use ReLU; the last shared layer is linear
/// and its output is scaled to unit length. A linear classifier on the joint
/// vector supplies the auxiliary classification loss.
#[derive(Debug, Clone)]
pub struct JointHeads<T = f32> {
    config: HeadsConfig,
    params: Params<T>,
    vector: [Linear; 2],
    raster: [Linear; 2],
    shared: [Linear; 2],
    classifier: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadsCache<T> {
    branch: Branch,
    /// Input followed by each hidden activation.
    acts: Vec<Array2<T>>,
    pres: Vec<Array2<T>>,
    norms: Vec<T>,
    pub u: Array2<T>,
}

fn layout<T: Scalar>(
    c: &HeadsConfig,
    p: &mut Params<T>,
    rng: &mut ChaCha8Rng,
) -> ([Linear; 2], [Linear; 2], [Linear; 2], Linear) {
    let h = c.hidden;
    let vector = [
        Linear::new(p, "fv.0", c.vector_dim, h, rng),
        Linear::new(p, "fv.1", h, h, rng),
    ];
    let raster = [
        Linear::new(p, "fr.0", c.raster_dim, h, rng),
        Linear::new(p, "fr.1", h, h, rng),
    ];
    let shared = [
        Linear::new(p, "fs.0", h, h, rng),
        Linear::new(p, "fs.1", h, c.joint_dim, rng),
    ];
    let classifier = Linear::new(p, "cls", c.joint_dim, c.n_classes, rng);
    (vector, raster, shared, classifier)
}

impl<T: Scalar> JointHeads<T> {
    pub fn new(config: HeadsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (vector, raster, shared, classifier) = layout(&config, &mut params, &mut rng);
        Ok(JointHeads {
            config,
            params,
            vector,
            raster,
            shared,
            classifier,
        })
    }

    pub fn from_params(config: HeadsConfig, params: Params<T>) -> Result<Self> {
        let mut heads = Self::new(config, 0)?;
        if params.len() != heads.params.len()
            || params
                .iter()
                .zip(heads.params.iter())
                .any(|((a, x), (b, y))| a != b || x.dim() != y.dim())
        {
            return Err(Error::Format("joint head parameters do not match their shape".into()));
        }
        heads.params = params;
        Ok(heads)
    }

    pub fn config(&self) -> &HeadsConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> JointHeads<U> {
        JointHeads {
            config: self.config,
            params: self.params.cast(),
            vector: self.vector,
            raster: self.raster,
            shared: self.shared,
            classifier: self.classifier,
        }
    }

    fn path(&self, branch: Branch) -> [Linear; 4] {
        let first = match branch {
            Branch::Vector => self.vector,
            Branch::Raster => self.raster,
        };
        [first[0], first[1], self.shared[0], self.shared[1]]
    }

    /// Unit-length joint vectors, one per input row.
    pub fn forward(&self, branch: Branch, x: &Array2<T>) -> Result<(Array2<T>, HeadsCache<T>)> {
        let want = match branch {
            Branch::Vector => self.config.vector_dim,
            Branch::Raster => self.config.raster_dim,
        };
        if x.ncols() != want {
            return Err(Error::Shape(format!(
                "{branch:?} branch takes {want} features, got {}",
                x.ncols()
            )));
        }
        let layers = self.path(branch);
        let mut acts = vec![x.clone()];
        let mut pres = Vec::with_capacity(3);
        for layer in &layers[..3] {
            let pre = layer.forward(&self.params, acts.last().expect("input"));
            acts.push(relu(&pre));
            pres.push(pre);
        }
        let y = layers[3].forward(&self.params, acts.last().expect("hidden"));
        let tiny = T::of(1e-12);
        let norms: Vec<T> = y
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(tiny))
            .collect();
        let mut u = y;
        for (mut row, &n) in u.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        Ok((
            u.clone(),
            HeadsCache {
                branch,
                acts,
                pres,
                norms,
                u,
            },
        ))
    }

    pub fn class_logits(&self, u: &Array2<T>) -> Array2<T> {
        self.classifier.forward(&self.params, u)
    }

    /// Gradient of the classifier given `∂L/∂logits`; returns `∂L/∂u`.
    pub fn class_backward(&self, g: &mut Params<T>, u: &Array2<T>, dlogits: &Array2<T>) -> Array2<T> {
        self.classifier.backward(&self.params, g, u, dlogits)
    }

    /// Accumulates parameter gradients for `∂L/∂u` and returns `∂L/∂x`.
    pub fn backward(&self, g: &mut Params<T>, cache: &HeadsCache<T>, du: &Array2<T>) -> Array2<T> {
        let layers = self.path(cache.branch);
        // d(y/|y|) = (du − u (u·du)) / |y|
        let mut dy = du.clone();
        for ((mut row, u), &n) in dy
            .rows_mut()
            .into_iter()
            .zip(cache.u.rows())
            .zip(&cache.norms)
        {
            let proj = u.dot(&row);
            Zip::from(&mut row).and(&u).for_each(|d, &uu| *d = (*d - uu * proj) / n);
        }
        let mut dx = layers[3].backward(&self.params, g, &cache.acts[3], &dy);
        for i in (0..3).rev() {
            let dpre = relu_backward(&cache.pres[i], &dx);
            dx = layers[i].backward(&self.params, g, &cache.acts[i], &dpre);
        }
        dx
    }

    /// Joint vectors without the cache.
    pub fn embed(&self, branch: Branch, x: &Array2<T>) -> Result<Array2<T>> {
        Ok(self.forward(branch, x)?.0)
    }
}
