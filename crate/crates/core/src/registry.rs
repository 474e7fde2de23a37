//! Matching strategies behind one trait, selectable by name at run time.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::evaluation::{fuse_dual, fuse_external, match_score};
use crate::geometry::Template3D;
use crate::graphnet::{correct_and_embed, NetworkConfig, NetworkParams};

/// What a matcher keeps per template between encoding and scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub template_id: String,
    pub codes: Vec<Vec<f64>>,
}

pub trait Matcher: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, tpl: &Template3D) -> Result<Encoded>;
    fn score(&self, a: &Encoded, b: &Encoded) -> Result<f64>;
}

/// One trained network; 3D or 2D input according to its config.
pub struct GraphMatcher {
    name: String,
    cfg: NetworkConfig,
    params: NetworkParams,
}

impl GraphMatcher {
    pub fn new(name: impl Into<String>, cfg: NetworkConfig, params: NetworkParams) -> Self {
        Self { name: name.into(), cfg, params }
    }
}

impl Matcher for GraphMatcher {
    fn name(&self) -> &str {
        &self.name
    }

    fn encode(&self, tpl: &Template3D) -> Result<Encoded> {
        let e = correct_and_embed(tpl, &self.params.stn, &self.params.embed, &self.cfg)?;
        Ok(Encoded { template_id: tpl.template_id.clone(), codes: vec![e.0] })
    }

    fn score(&self, a: &Encoded, b: &Encoded) -> Result<f64> {
        match_score(&a.codes[0], &b.codes[0])
    }
}

/// The all-pose network `s1` fused with the same-pose network `s2`.
pub struct DualMatcher {
    all_pose: GraphMatcher,
    same_pose: GraphMatcher,
}

impl DualMatcher {
    pub fn new(cfg: NetworkConfig, all_pose: NetworkParams, same_pose: NetworkParams) -> Self {
        Self {
            all_pose: GraphMatcher::new("all-pose", cfg.clone(), all_pose),
            same_pose: GraphMatcher::new("same-pose", cfg, same_pose),
        }
    }
}

impl Matcher for DualMatcher {
    fn name(&self) -> &str {
        "dual"
    }

    fn encode(&self, tpl: &Template3D) -> Result<Encoded> {
        let mut a = self.all_pose.encode(tpl)?;
        a.codes.extend(self.same_pose.encode(tpl)?.codes);
        Ok(a)
    }

    fn score(&self, a: &Encoded, b: &Encoded) -> Result<f64> {
        let s1 = match_score(&a.codes[0], &b.codes[0])?;
        let s2 = match_score(&a.codes[1], &b.codes[1])?;
        fuse_dual(s1, s2)
    }
}

/// Scores of an outside matcher keyed by unordered template-id pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalScores(pub HashMap<(String, String), f64>);

impl ExternalScores {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        self.0.get(&(a.to_string(), b.to_string())).or_else(|| self.0.get(&(b.to_string(), a.to_string()))).copied()
    }
}

/// An internal matcher fused with external scores; missing external rows
/// count as 0.
pub struct ExternalFusionMatcher {
    inner: Box<dyn Matcher>,
    external: ExternalScores,
}

impl ExternalFusionMatcher {
    pub fn new(inner: Box<dyn Matcher>, external: ExternalScores) -> Self {
        Self { inner, external }
    }
}

impl Matcher for ExternalFusionMatcher {
    fn name(&self) -> &str {
        "external"
    }

    fn encode(&self, tpl: &Template3D) -> Result<Encoded> {
        self.inner.encode(tpl)
    }

    fn score(&self, a: &Encoded, b: &Encoded) -> Result<f64> {
        let s = self.inner.score(a, b)?;
        let s3 = self.external.get(&a.template_id, &b.template_id).unwrap_or(0.0);
        fuse_external(s3, s * 300.0)
    }
}

/// Everything a factory may draw on.
#[derive(Default)]
pub struct MatcherContext {
    /// Trained networks by role: `3d`, `2d`, `same-pose`.
    pub networks: BTreeMap<String, (NetworkConfig, NetworkParams)>,
    pub external: Option<ExternalScores>,
    /// Matcher wrapped by `external`.
    pub inner: Option<String>,
}

impl MatcherContext {
    fn network(&self, role: &str) -> Result<&(NetworkConfig, NetworkParams)> {
        self.networks.get(role).ok_or_else(|| Error::invalid(format!("no `{role}` network supplied")))
    }
}

type Factory = Box<dyn Fn(&MatcherRegistry, &MatcherContext) -> Result<Box<dyn Matcher>> + Send + Sync>;

pub struct MatcherRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for MatcherRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

impl MatcherRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    /// `graph3d`, `graph2d`, `dual` and `external`.
    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        for (name, role, three_d) in [("graph3d", "3d", true), ("graph2d", "2d", false)] {
            r.register(name, move |_, ctx| {
                let (cfg, p) = ctx.network(role)?;
                if cfg.is_3d() != three_d {
                    return Err(Error::Config(format!("`{role}` network has input_dim {}", cfg.input_dim)));
                }
                Ok(Box::new(GraphMatcher::new(name, cfg.clone(), p.clone())))
            });
        }
        r.register("dual", |_, ctx| {
            let (cfg, a) = ctx.network("3d")?;
            let (cfg_b, b) = ctx.network("same-pose")?;
            if cfg != cfg_b {
                return Err(Error::Config("dual networks must share one configuration".into()));
            }
            Ok(Box::new(DualMatcher::new(cfg.clone(), a.clone(), b.clone())))
        });
        r.register("external", |reg, ctx| {
            let inner = ctx.inner.as_deref().unwrap_or("graph3d");
            if inner == "external" {
                return Err(Error::Config("external fusion cannot wrap itself".into()));
            }
            let inner = reg.create(inner, ctx)?;
            let ext = ctx.external.clone().ok_or_else(|| Error::invalid("external fusion needs a score file"))?;
            Ok(Box::new(ExternalFusionMatcher::new(inner, ext)))
        });
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&MatcherRegistry, &MatcherContext) -> Result<Box<dyn Matcher>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(|k| k.as_str())
    }

    pub fn create(&self, name: &str, ctx: &MatcherContext) -> Result<Box<dyn Matcher>> {
        let f = self.factories.get(name).ok_or_else(|| Error::UnknownMatcher(name.to_string()))?;
        f(self, ctx)
    }
}
