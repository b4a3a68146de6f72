//! Categorical feature embedding, combination and injection.
//!
//! Each feature `k` has an embedding table `E_k`. For an injection site the
//! combined vector is `e = Σ_k (E_k[f_k]·V_{k,site} + b_{k,site})`. Tables are
//! shared between sites; only the affine transforms are per site.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoricalFeature {
    pub name: String,
    pub cardinality: usize,
    pub emb_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoricalSpec {
    pub features: Vec<CategoricalFeature>,
}

impl CategoricalSpec {
    /// Dialect (4) and domain (6) features sharing one embedding width.
    pub fn dialect_domain(emb_dim: usize) -> Self {
        CategoricalSpec {
            features: vec![
                CategoricalFeature {
                    name: "dialect".into(),
                    cardinality: 4,
                    emb_dim,
                },
                CategoricalFeature {
                    name: "domain".into(),
                    cardinality: 6,
                    emb_dim,
                },
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Config("at least one categorical feature is required".into()));
        }
        for f in &self.features {
            if f.cardinality == 0 || f.emb_dim == 0 {
                return Err(Error::Config(format!(
                    "feature `{}` needs positive cardinality and embedding size",
                    f.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    Encoder,
    Decoder,
}

impl Site {
    pub fn tag(self) -> &'static str {
        match self {
            Site::Encoder => "enc",
            Site::Decoder => "dec",
        }
    }
}

pub fn table_name(feature: &str) -> String {
    format!("cond.E.{feature}")
}

pub fn transform_names(site: Site, feature: &str) -> (String, String) {
    (
        format!("cond.V.{}.{feature}", site.tag()),
        format!("cond.b.{}.{feature}", site.tag()),
    )
}

/// Parameter declarations for the conditioning block. Sites with `None`
/// width get no transforms; with both `None` nothing is declared.
pub fn param_specs(
    spec: &CategoricalSpec,
    enc_dim: Option<usize>,
    dec_dim: Option<usize>,
) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    if enc_dim.is_none() && dec_dim.is_none() {
        return out;
    }
    for f in &spec.features {
        out.push(ParamSpec::new(
            table_name(&f.name),
            vec![f.cardinality, f.emb_dim],
            Init::Normal(0.1),
        ));
    }
    for (site, dim) in [(Site::Encoder, enc_dim), (Site::Decoder, dec_dim)] {
        let Some(dim) = dim else { continue };
        for f in &spec.features {
            let (v, b) = transform_names(site, &f.name);
            out.push(ParamSpec::new(v, vec![f.emb_dim, dim], Init::Glorot));
            out.push(ParamSpec::new(b, vec![dim], Init::Zeros));
        }
    }
    out
}

/// Positions of the conditioning tensors inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct CondLayout {
    pub spec: CategoricalSpec,
    tables: Vec<usize>,
    enc: Option<(usize, Vec<(usize, usize)>)>,
    dec: Option<(usize, Vec<(usize, usize)>)>,
}

impl CondLayout {
    pub fn resolve<T: Scalar>(
        spec: &CategoricalSpec,
        store: &ParamStore<T>,
        enc_dim: Option<usize>,
        dec_dim: Option<usize>,
    ) -> Result<Self> {
        let find = |n: &str| {
            store
                .position(n)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{n}`")))
        };
        let mut tables = Vec::new();
        if enc_dim.is_some() || dec_dim.is_some() {
            for f in &spec.features {
                tables.push(find(&table_name(&f.name))?);
            }
        }
        let site = |site: Site, dim: Option<usize>| -> Result<Option<(usize, Vec<(usize, usize)>)>> {
            let Some(dim) = dim else { return Ok(None) };
            let mut v = Vec::new();
            for f in &spec.features {
                let (vn, bn) = transform_names(site, &f.name);
                v.push((find(&vn)?, find(&bn)?));
            }
            Ok(Some((dim, v)))
        };
        Ok(CondLayout {
            spec: spec.clone(),
            tables,
            enc: site(Site::Encoder, enc_dim)?,
            dec: site(Site::Decoder, dec_dim)?,
        })
    }

    pub fn site_dim(&self, site: Site) -> Option<usize> {
        match site {
            Site::Encoder => self.enc.as_ref().map(|s| s.0),
            Site::Decoder => self.dec.as_ref().map(|s| s.0),
        }
    }

    /// `e_k = E_k[id]`.
    pub fn embed_feature<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        k: usize,
        id: usize,
    ) -> Result<Var> {
        let f = self
            .spec
            .features
            .get(k)
            .ok_or_else(|| Error::Input(format!("feature index {k} out of range")))?;
        if id >= f.cardinality {
            return Err(Error::Input(format!(
                "category id {id} out of range for `{}` (cardinality {})",
                f.name, f.cardinality
            )));
        }
        let table = *self
            .tables
            .get(k)
            .ok_or_else(|| Error::Contract("conditioning tables are not present".into()))?;
        g.row(bound[table], id)
    }

    /// Combined feature vector `[1 × d_site]` for one injection site.
    pub fn combine<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        site: Site,
        ids: &[usize],
    ) -> Result<Var> {
        if ids.len() != self.spec.len() {
            return Err(Error::Input(format!(
                "expected {} category ids, got {}",
                self.spec.len(),
                ids.len()
            )));
        }
        let (_, transforms) = match site {
            Site::Encoder => self.enc.as_ref(),
            Site::Decoder => self.dec.as_ref(),
        }
        .ok_or_else(|| Error::Contract(format!("no {} injection configured", site.tag())))?;
        let mut acc: Option<Var> = None;
        for (k, (&id, &(v, b))) in ids.iter().zip(transforms).enumerate() {
            let e_k = self.embed_feature(g, bound, k, id)?;
            let term = g.matmul(e_k, bound[v])?;
            let term = g.add_bias(term, bound[b])?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one feature"))
    }
}

/// Appends `e` to every frame of `x`; `None` leaves `x` unchanged.
pub fn inject_encoder<T: Scalar>(g: &mut Graph<T>, x: Var, e: Option<Var>) -> Result<Var> {
    let Some(e) = e else { return Ok(x) };
    let rows = g.shape(x)[0];
    let tiled = g.broadcast_rows(e, rows)?;
    g.concat(&[x, tiled], 1)
}

/// `[c_i, e]`; `None` leaves `c_i` unchanged.
pub fn inject_decoder<T: Scalar>(g: &mut Graph<T>, c: Var, e: Option<Var>) -> Result<Var> {
    match e {
        Some(e) => g.concat(&[c, e], 1),
        None => Ok(c),
    }
}
