//! Per-domain adapters on top of the NCA backbone.
//!
//! An [`NcadaptModel`] owns a flat, ordered table of named parameters. Each
//! entry belongs either to the shared backbone or to one domain, and carries
//! a trainable flag derived from the freeze policy and the active domain.
//! The first stage trains everything; once the policy is applied only the
//! parts it names keep learning, and parameters of earlier domains never
//! change again.

mod nqm;
mod policy;

pub use nqm::{nqm_score, predict_head, select_head, HeadChoice, HeadPrediction, NqmRule};
pub use policy::{AdapterMode, FreezePolicy, PerceptionScope};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nca::{m3d_forward, AdapterVars, ArchConfig, LevelVars, NcaLevelParams};

/// Random stream used for every parameter initialisation of a model.
const INIT_STREAM: u64 = 0x1417;

/// Who a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Backbone,
    /// Domain ids start at 1, in registration order.
    Domain(usize),
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Backbone => f.write_str("backbone"),
            Owner::Domain(k) => write!(f, "domain-{k}"),
        }
    }
}

impl FromStr for Owner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "backbone" {
            return Ok(Owner::Backbone);
        }
        s.strip_prefix("domain-")
            .and_then(|k| k.parse().ok())
            .filter(|&k: &usize| k >= 1)
            .map(Owner::Domain)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter owner '{s}'")))
    }
}

impl Serialize for Owner {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Owner {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What a parameter tensor does inside its level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Kernel,
    Bias,
    Mlp1,
    Mlp2,
    AdapterDown,
    AdapterUp,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Kernel,
        Role::Bias,
        Role::Mlp1,
        Role::Mlp2,
        Role::AdapterDown,
        Role::AdapterUp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Kernel => "kernel",
            Role::Bias => "bias",
            Role::Mlp1 => "mlp1",
            Role::Mlp2 => "mlp2",
            Role::AdapterDown => "adapter_down",
            Role::AdapterUp => "adapter_up",
        }
    }

    pub fn is_perception(self) -> bool {
        matches!(self, Role::Kernel | Role::Bias)
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, Role::AdapterDown | Role::AdapterUp)
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub owner: Owner,
    pub level: usize,
    pub role: Role,
    pub trainable: bool,
    pub value: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainInfo {
    pub id: usize,
    pub label: String,
}

/// Filters accepted by [`NcadaptModel::count_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    Trainable,
    Backbone,
    Domain(usize),
}

/// Parameters of one model recorded on a tape.
pub struct Recorded {
    pub levels: Vec<LevelVars>,
    /// `(index into the parameter table, leaf)` for every differentiated
    /// parameter.
    pub leaves: Vec<(usize, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcadaptModel {
    arch: ArchConfig,
    policy: FreezePolicy,
    scope: PerceptionScope,
    seed: u64,
    frozen: bool,
    domains: Vec<DomainInfo>,
    params: Vec<Param>,
}

fn param_name(owner: Owner, level: usize, role: Role) -> String {
    match owner {
        Owner::Backbone if role.is_adapter() => format!("shared.level{level}.{}", role.name()),
        Owner::Backbone => format!("level{level}.{}", role.name()),
        Owner::Domain(k) => format!("domain{k}.level{level}.{}", role.name()),
    }
}

/// Inverse of the naming scheme: `(owner, level, role)` of a parameter
/// name, or `None` for a name no model would produce.
pub fn parse_param_name(name: &str) -> Option<(Owner, usize, Role)> {
    let mut parts = name.split('.');
    let first = parts.next()?;
    let (prefix, level_part) = if first.starts_with("level") {
        (None, first)
    } else {
        (Some(first), parts.next()?)
    };
    let role_part = parts.next()?;
    if parts.next().is_some() {
        return None;
    }
    let level: usize = level_part.strip_prefix("level")?.parse().ok()?;
    let role = Role::ALL.into_iter().find(|r| r.name() == role_part)?;
    let owner = match prefix {
        None => Owner::Backbone,
        Some("shared") => Owner::Backbone,
        Some(p) => Owner::Domain(p.strip_prefix("domain")?.parse().ok().filter(|&k: &usize| k >= 1)?),
    };
    (param_name(owner, level, role) == name).then_some((owner, level, role))
}

impl NcadaptModel {
    /// Fresh backbone with no domains registered.
    pub fn new(arch: ArchConfig, policy: FreezePolicy, scope: PerceptionScope, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut model = Self {
            arch,
            policy,
            scope,
            seed,
            frozen: false,
            domains: Vec::new(),
            params: Vec::new(),
        };
        for (l, lp) in model.initial_levels()?.into_iter().enumerate() {
            if scope == PerceptionScope::Shared {
                model.push(Owner::Backbone, l, Role::Kernel, lp.kernel);
                model.push(Owner::Backbone, l, Role::Bias, lp.bias);
            }
            model.push(Owner::Backbone, l, Role::Mlp1, lp.mlp1);
            model.push(Owner::Backbone, l, Role::Mlp2, lp.mlp2);
        }
        model.refresh_flags();
        Ok(model)
    }

    /// Rebuilds a model from stored parts, checking every tensor against
    /// the architecture.
    pub fn from_parts(
        arch: ArchConfig,
        policy: FreezePolicy,
        scope: PerceptionScope,
        seed: u64,
        frozen: bool,
        domains: Vec<DomainInfo>,
        params: Vec<Param>,
    ) -> Result<Self> {
        arch.validate()?;
        let model = Self {
            arch,
            policy,
            scope,
            seed,
            frozen,
            domains,
            params,
        };
        for (i, d) in model.domains.iter().enumerate() {
            if d.id != i + 1 {
                return Err(Error::Data(format!("domain ids out of order at '{}'", d.label)));
            }
        }
        for p in &model.params {
            if p.name != param_name(p.owner, p.level, p.role) || p.level >= model.arch.levels {
                return Err(Error::Data(format!("unexpected parameter '{}'", p.name)));
            }
            let expect = model.expected_shape(p.level, p.role);
            if p.value.shape() != expect.as_slice() {
                return Err(Error::Data(format!(
                    "parameter '{}' has shape {:?}, expected {expect:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::Data(format!("parameter '{}' is not finite", p.name)));
            }
        }
        if model.domains.is_empty() {
            if model.scope == PerceptionScope::Shared {
                model.level_params(1)?;
            }
        } else {
            for d in 1..=model.domains.len() {
                model.level_params(d)?;
            }
        }
        let stored: Vec<bool> = model.params.iter().map(|p| p.trainable).collect();
        let mut model = model;
        model.refresh_flags();
        if model.params.iter().zip(&stored).any(|(p, &t)| p.trainable != t) {
            return Err(Error::Data("stored trainable flags disagree with the freeze policy".into()));
        }
        Ok(model)
    }

    fn expected_shape(&self, level: usize, role: Role) -> Vec<usize> {
        let (c, h, a) = (self.arch.channels, self.arch.hidden, self.arch.adapter_width);
        match role {
            Role::Kernel => vec![c, self.arch.taps(level)],
            Role::Bias => vec![c],
            Role::Mlp1 => vec![h, 2 * c],
            Role::Mlp2 => vec![c, h],
            Role::AdapterDown => vec![a, c],
            Role::AdapterUp => vec![c, a],
        }
    }

    fn initial_levels(&self) -> Result<Vec<NcaLevelParams<f32>>> {
        let mut rng = Rng::new(self.seed, INIT_STREAM);
        (0..self.arch.levels)
            .map(|l| NcaLevelParams::init(&self.arch, l, &mut rng))
            .collect()
    }

    fn push(&mut self, owner: Owner, level: usize, role: Role, value: Tensor<f32>) {
        self.params.push(Param {
            name: param_name(owner, level, role),
            owner,
            level,
            role,
            trainable: false,
            value,
        });
    }

    fn find(&self, owner: Owner, level: usize, role: Role) -> Option<usize> {
        self.params
            .iter()
            .position(|p| p.owner == owner && p.level == level && p.role == role)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn policy(&self) -> FreezePolicy {
        self.policy
    }

    pub fn scope(&self) -> PerceptionScope {
        self.scope
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn domains(&self) -> &[DomainInfo] {
        &self.domains
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Mutable access to parameter values; names, owners and flags stay
    /// under the model's control.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<f32> {
        &mut self.params[index].value
    }

    /// The most recently registered domain, which is the one being trained.
    pub fn active_domain(&self) -> Option<usize> {
        self.domains.last().map(|d| d.id)
    }

    pub fn domain_id(&self, label: &str) -> Option<usize> {
        self.domains.iter().find(|d| d.label == label).map(|d| d.id)
    }

    /// Registers a new domain, allocating its adapter and (under per-domain
    /// scope) its perception copy. Earlier domains are frozen from now on.
    pub fn add_domain(&mut self, label: &str) -> Result<usize> {
        if self.domains.iter().any(|d| d.label == label) {
            return Err(Error::InvalidArgument(format!("domain '{label}' already registered")));
        }
        let id = self.domains.len() + 1;
        let owner = Owner::Domain(id);
        if self.scope == PerceptionScope::PerDomain {
            let source: Vec<(Tensor<f32>, Tensor<f32>)> = match self.active_domain() {
                Some(prev) => (0..self.arch.levels)
                    .map(|l| {
                        let k = self.find(Owner::Domain(prev), l, Role::Kernel).expect("perception copy");
                        let b = self.find(Owner::Domain(prev), l, Role::Bias).expect("perception copy");
                        (self.params[k].value.clone(), self.params[b].value.clone())
                    })
                    .collect(),
                None => self
                    .initial_levels()?
                    .into_iter()
                    .map(|lp| (lp.kernel, lp.bias))
                    .collect(),
            };
            for (l, (k, b)) in source.into_iter().enumerate() {
                self.push(owner, l, Role::Kernel, k);
                self.push(owner, l, Role::Bias, b);
            }
        }
        let adapter_owner = match self.policy.adapter_mode() {
            AdapterMode::Off => None,
            AdapterMode::PerDomain => Some(owner),
            AdapterMode::Shared if self.find(Owner::Backbone, 0, Role::AdapterDown).is_none() => {
                Some(Owner::Backbone)
            }
            AdapterMode::Shared => None,
        };
        if let Some(adapter_owner) = adapter_owner {
            let (c, a) = (self.arch.channels, self.arch.adapter_width);
            let bound = 1.0 / (c as f32).sqrt();
            for l in 0..self.arch.levels {
                let mut rng = Rng::new(self.seed, INIT_STREAM).fork_path(&[id as u64, l as u64]);
                self.push(adapter_owner, l, Role::AdapterDown, Tensor::uniform(&[a, c], -bound, bound, &mut rng)?);
                self.push(adapter_owner, l, Role::AdapterUp, Tensor::zeros(&[c, a])?);
            }
        }
        self.domains.push(DomainInfo {
            id,
            label: label.to_string(),
        });
        self.refresh_flags();
        Ok(id)
    }

    /// Switches from first-stage training (everything trainable) to the
    /// freeze policy's trainable set.
    pub fn apply_freeze_policy(&mut self, policy: FreezePolicy) -> Result<()> {
        if policy.adapter_mode() != self.policy.adapter_mode() && !self.domains.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "policy '{policy}' allocates adapters differently from '{}'",
                self.policy
            )));
        }
        self.policy = policy;
        self.frozen = true;
        self.refresh_flags();
        Ok(())
    }

    fn refresh_flags(&mut self) {
        let active = self.active_domain();
        let last_level = self.arch.levels - 1;
        let (policy, frozen) = (self.policy, self.frozen);
        for p in &mut self.params {
            let current = match p.owner {
                Owner::Backbone => true,
                Owner::Domain(k) => Some(k) == active,
            };
            p.trainable = current
                && (!frozen
                    || match policy {
                        FreezePolicy::None => true,
                        FreezePolicy::Ncadapt => p.role.is_perception() || p.role.is_adapter(),
                        FreezePolicy::Fl => p.level != last_level,
                        FreezePolicy::Fh => p.level != 0,
                        FreezePolicy::Fc => p.role.is_perception(),
                        FreezePolicy::Sa => p.role.is_adapter(),
                    });
        }
    }

    pub fn count_params(&self, filter: ParamFilter) -> usize {
        self.params
            .iter()
            .filter(|p| match filter {
                ParamFilter::All => true,
                ParamFilter::Trainable => p.trainable,
                ParamFilter::Backbone => p.owner == Owner::Backbone,
                ParamFilter::Domain(k) => p.owner == Owner::Domain(k),
            })
            .map(|p| p.value.len())
            .sum()
    }

    /// Domains that own parameters of their own and so form distinct
    /// inference heads. Without any, the model has a single head: the
    /// latest domain.
    pub fn heads(&self) -> Vec<usize> {
        let owned: Vec<usize> = self
            .domains
            .iter()
            .map(|d| d.id)
            .filter(|&d| self.params.iter().any(|p| p.owner == Owner::Domain(d)))
            .collect();
        if owned.is_empty() {
            self.active_domain().into_iter().collect()
        } else {
            owned
        }
    }

    /// Parameter indices that make up head `domain`, per level:
    /// `(kernel, bias, mlp1, mlp2, adapter)`.
    #[allow(clippy::type_complexity)]
    fn level_params(&self, domain: usize) -> Result<Vec<(usize, usize, usize, usize, Option<(usize, usize)>)>> {
        if self.domains.is_empty() && self.scope == PerceptionScope::PerDomain {
            return Err(Error::InvalidArgument("per-domain perception needs a registered domain".into()));
        }
        if !self.domains.is_empty() && !(1..=self.domains.len()).contains(&domain) {
            return Err(Error::InvalidArgument(format!(
                "domain {domain} not registered ({} domains)",
                self.domains.len()
            )));
        }
        let missing = |what: &str, l: usize| Error::Data(format!("missing {what} for level {l} of domain {domain}"));
        let perception_owner = match self.scope {
            PerceptionScope::Shared => Owner::Backbone,
            PerceptionScope::PerDomain => Owner::Domain(domain),
        };
        (0..self.arch.levels)
            .map(|l| {
                let kernel = self.find(perception_owner, l, Role::Kernel).ok_or_else(|| missing("kernel", l))?;
                let bias = self.find(perception_owner, l, Role::Bias).ok_or_else(|| missing("bias", l))?;
                let mlp1 = self.find(Owner::Backbone, l, Role::Mlp1).ok_or_else(|| missing("mlp1", l))?;
                let mlp2 = self.find(Owner::Backbone, l, Role::Mlp2).ok_or_else(|| missing("mlp2", l))?;
                let adapter_owner = match self.policy.adapter_mode() {
                    AdapterMode::Off => None,
                    AdapterMode::PerDomain => Some(Owner::Domain(domain)),
                    AdapterMode::Shared => Some(Owner::Backbone),
                };
                let adapter = match adapter_owner {
                    Some(o) if !self.domains.is_empty() => Some((
                        self.find(o, l, Role::AdapterDown).ok_or_else(|| missing("adapter", l))?,
                        self.find(o, l, Role::AdapterUp).ok_or_else(|| missing("adapter", l))?,
                    )),
                    _ => None,
                };
                Ok((kernel, bias, mlp1, mlp2, adapter))
            })
            .collect()
    }

    /// Records head `domain` on `tape`. With `differentiate`, trainable
    /// tensors become leaves and everything else constants; without it all
    /// tensors are constants.
    pub fn record(&self, tape: &mut Tape<f32>, domain: usize, differentiate: bool) -> Result<Recorded> {
        let mut leaves = Vec::new();
        let mut var = |tape: &mut Tape<f32>, i: usize| {
            let p = &self.params[i];
            if differentiate && p.trainable {
                let v = tape.leaf(p.value.clone());
                leaves.push((i, v));
                v
            } else {
                tape.constant(p.value.clone())
            }
        };
        let levels = self
            .level_params(domain)?
            .into_iter()
            .map(|(k, b, m1, m2, ad)| LevelVars {
                kernel: var(tape, k),
                bias: var(tape, b),
                mlp1: var(tape, m1),
                mlp2: var(tape, m2),
                adapter: ad.map(|(d, u)| AdapterVars {
                    down: var(tape, d),
                    up: var(tape, u),
                }),
            })
            .collect();
        Ok(Recorded { levels, leaves })
    }

    /// Logits of head `domain` for `image`, recorded on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        image: &Tensor<f32>,
        domain: usize,
        rng: &Rng,
        differentiate: bool,
    ) -> Result<(Var, Recorded)> {
        let rec = self.record(tape, domain, differentiate)?;
        let out = m3d_forward(tape, image, &rec.levels, &self.arch, rng)?;
        Ok((out, rec))
    }

    /// One stochastic inference: foreground probabilities of head `domain`.
    pub fn infer(&self, image: &Tensor<f32>, domain: usize, rng: &Rng) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, image, domain, rng, false)?;
        Ok(tape.value(out).map(|z| 1.0 / (1.0 + (-z).exp())))
    }

    /// SHA-256 of every parameter tensor, keyed by name.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.digest()))
            .collect()
    }

    /// Copies of all parameter values in table order.
    pub fn snapshot(&self) -> Vec<Tensor<f32>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: Vec<Tensor<f32>>) -> Result<()> {
        if values.len() != self.params.len()
            || values.iter().zip(&self.params).any(|(v, p)| v.shape() != p.value.shape())
        {
            return Err(Error::Shape("snapshot does not match the parameter table".into()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }
}

/// One line of the parameter audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub name: &'static str,
    pub count: usize,
    /// Published value for the volumetric default architecture.
    pub reference: Option<usize>,
}

/// Parameter counts of the configurations compared in the evaluation:
/// totals, trainable sets under each freeze policy and per-domain growth.
pub fn param_audit(arch: &ArchConfig) -> Result<Vec<AuditRow>> {
    let published = *arch == ArchConfig::default_3d();
    let reference = |v: usize| published.then_some(v);
    let trainable_after = |policy: FreezePolicy| -> Result<usize> {
        let mut m = NcadaptModel::new(arch.clone(), policy, PerceptionScope::Shared, 0)?;
        m.add_domain("a")?;
        m.apply_freeze_policy(policy)?;
        m.add_domain("b")?;
        Ok(m.count_params(ParamFilter::Trainable))
    };
    let mut sa = NcadaptModel::new(arch.clone(), FreezePolicy::Sa, PerceptionScope::Shared, 0)?;
    sa.add_domain("a")?;
    sa.apply_freeze_policy(FreezePolicy::Sa)?;
    sa.add_domain("b")?;
    let mut nc = NcadaptModel::new(arch.clone(), FreezePolicy::Ncadapt, PerceptionScope::Shared, 0)?;
    nc.add_domain("a")?;
    let fresh = NcadaptModel::new(arch.clone(), FreezePolicy::None, PerceptionScope::Shared, 0)?;
    Ok(vec![
        AuditRow {
            name: "all",
            count: fresh.count_params(ParamFilter::All),
            reference: reference(12_480),
        },
        AuditRow {
            name: "ncadapt-trainable",
            count: trainable_after(FreezePolicy::Ncadapt)?,
            reference: reference(6_336),
        },
        AuditRow {
            name: "per-domain",
            count: nc.count_params(ParamFilter::Domain(1)),
            reference: reference(384),
        },
        AuditRow {
            name: "fc",
            count: trainable_after(FreezePolicy::Fc)?,
            reference: reference(5_952),
        },
        AuditRow {
            name: "fh",
            count: trainable_after(FreezePolicy::Fh)?,
            reference: reference(3_712),
        },
        AuditRow {
            name: "fl",
            count: trainable_after(FreezePolicy::Fl)?,
            reference: reference(8_768),
        },
        AuditRow {
            name: "sa-total",
            count: sa.count_params(ParamFilter::All),
            reference: reference(12_864),
        },
        AuditRow {
            name: "sa-trainable",
            count: sa.count_params(ParamFilter::Trainable),
            reference: reference(384),
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(policy: FreezePolicy, scope: PerceptionScope) -> NcadaptModel {
        NcadaptModel::new(ArchConfig::default_3d(), policy, scope, 7).unwrap()
    }

    #[test]
    fn fresh_backbone_counts() {
        let m = model(FreezePolicy::Ncadapt, PerceptionScope::Shared);
        assert_eq!(m.count_params(ParamFilter::All), 12_480);
        assert_eq!(m.count_params(ParamFilter::Trainable), 12_480);
        assert!(m.heads().is_empty());
    }

    #[test]
    fn domains_grow_by_adapter_size() {
        let mut m = model(FreezePolicy::Ncadapt, PerceptionScope::Shared);
        assert_eq!(m.add_domain("a").unwrap(), 1);
        assert_eq!(m.count_params(ParamFilter::All), 12_480 + 384);
        assert_eq!(m.count_params(ParamFilter::Domain(1)), 384);
        m.apply_freeze_policy(FreezePolicy::Ncadapt).unwrap();
        m.add_domain("b").unwrap();
        m.add_domain("c").unwrap();
        assert_eq!(m.count_params(ParamFilter::All), 12_480 + 3 * 384);
        assert_eq!(m.count_params(ParamFilter::Trainable), 6_336);
        assert_eq!(m.heads(), vec![1, 2, 3]);
        assert!(m.add_domain("b").is_err());
    }

    #[test]
    fn per_domain_scope_copies_perception() {
        let mut m = model(FreezePolicy::Ncadapt, PerceptionScope::PerDomain);
        assert_eq!(m.count_params(ParamFilter::All), 12_480 - 5_952);
        m.add_domain("a").unwrap();
        m.apply_freeze_policy(FreezePolicy::Ncadapt).unwrap();
        m.add_domain("b").unwrap();
        assert_eq!(m.count_params(ParamFilter::Domain(2)), 6_336);
        assert_eq!(m.count_params(ParamFilter::Trainable), 6_336);
        let shared = model(FreezePolicy::Ncadapt, PerceptionScope::Shared);
        let k1 = m.params().iter().find(|p| p.name == "domain1.level0.kernel").unwrap();
        let k0 = shared.params().iter().find(|p| p.name == "level0.kernel").unwrap();
        assert_eq!(k1.value, k0.value);
    }

    #[test]
    fn policies_without_adapters_have_one_head() {
        let mut m = model(FreezePolicy::None, PerceptionScope::Shared);
        m.add_domain("a").unwrap();
        m.add_domain("b").unwrap();
        assert_eq!(m.count_params(ParamFilter::All), 12_480);
        assert_eq!(m.heads(), vec![2]);
    }

    #[test]
    fn owner_text_round_trip() {
        for o in [Owner::Backbone, Owner::Domain(3)] {
            assert_eq!(o.to_string().parse::<Owner>().unwrap(), o);
        }
        assert!("domain-0".parse::<Owner>().is_err());
        assert!("head".parse::<Owner>().is_err());
    }

    #[test]
    fn mismatched_policy_is_rejected() {
        let mut m = model(FreezePolicy::Ncadapt, PerceptionScope::Shared);
        m.add_domain("a").unwrap();
        assert!(m.apply_freeze_policy(FreezePolicy::Fc).is_err());
    }
}
