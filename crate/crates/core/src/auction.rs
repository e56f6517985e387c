//! Bundles, valuation distributions, feasibility checks and the basic
//! economic quantities.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use caforge_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITEMS: usize = 12;
pub const ENUMERATION_MAX_BIDDERS: usize = 4;
pub const ENUMERATION_MAX_ITEMS: usize = 6;

/// Bidder and item counts. Bundles are the non-empty item subsets, ordered
/// by ascending bitmask, so bundle index `s` holds mask `s + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuctionConfig {
    bidders: usize,
    items: usize,
}

impl AuctionConfig {
    pub fn new(bidders: usize, items: usize) -> Result<Self> {
        if bidders == 0 {
            return Err(Error::config("at least one bidder is required"));
        }
        if !(1..=MAX_ITEMS).contains(&items) {
            return Err(Error::config(format!("item count {items} outside 1..={MAX_ITEMS}")));
        }
        Ok(AuctionConfig { bidders, items })
    }

    pub fn bidders(&self) -> usize {
        self.bidders
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn bundles(&self) -> usize {
        (1 << self.items) - 1
    }

    pub fn bundle_mask(&self, bundle: usize) -> u32 {
        debug_assert!(bundle < self.bundles());
        bundle as u32 + 1
    }

    pub fn bundle_index(&self, mask: u32) -> usize {
        debug_assert!(mask != 0 && (mask as usize) <= self.bundles());
        mask as usize - 1
    }

    pub fn singleton(&self, item: usize) -> usize {
        (1 << item) - 1
    }

    pub fn bundle_size(&self, bundle: usize) -> usize {
        self.bundle_mask(bundle).count_ones() as usize
    }

    pub fn incidence(&self) -> IncidenceMatrix {
        IncidenceMatrix::new(self.items)
    }
}

impl fmt::Display for AuctionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.bidders, self.items)
    }
}

/// Bundle bitmasks for `items` items in canonical order.
pub fn enumerate_bundles(items: usize) -> Result<Vec<u32>> {
    if !(1..=MAX_ITEMS).contains(&items) {
        return Err(Error::config(format!("item count {items} outside 1..={MAX_ITEMS}")));
    }
    Ok((1..(1u32 << items)).collect())
}

/// m×k 0/1 matrix, entry (j, s) set when item j belongs to bundle s.
#[derive(Clone, Debug, PartialEq)]
pub struct IncidenceMatrix {
    items: usize,
    bundles: usize,
}

impl IncidenceMatrix {
    pub fn new(items: usize) -> Self {
        IncidenceMatrix {
            items,
            bundles: (1 << items) - 1,
        }
    }

    pub fn contains(&self, item: usize, bundle: usize) -> bool {
        (bundle + 1) >> item & 1 == 1
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.items, self.bundles]
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = (0..self.items)
            .flat_map(|j| (0..self.bundles).map(move |s| (j, s)))
            .map(|(j, s)| if self.contains(j, s) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.items, self.bundles], data).expect("incidence shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    A,
    B,
    C,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Setting::A => "A",
            Setting::B => "B",
            Setting::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Setting::A),
            "B" | "b" => Ok(Setting::B),
            "C" | "c" => Ok(Setting::C),
            other => Err(Error::config(format!("unknown setting {other:?}"))),
        }
    }
}

/// Which bundles receive the U[-1, 1] complementarity term in settings B/C.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComplementarityScope {
    /// Multi-item bundles only; a singleton is worth exactly its item value.
    #[default]
    MultiItem,
    AllBundles,
}

impl FromStr for ComplementarityScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi-item" => Ok(ComplementarityScope::MultiItem),
            "all-bundles" => Ok(ComplementarityScope::AllBundles),
            other => Err(Error::config(format!("unknown complementarity scope {other:?}"))),
        }
    }
}

/// A valuation distribution: setting plus the complementarity convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Distribution {
    pub setting: Setting,
    #[serde(default)]
    pub scope: ComplementarityScope,
}

impl Distribution {
    pub fn new(setting: Setting) -> Self {
        Distribution {
            setting,
            scope: ComplementarityScope::default(),
        }
    }

    pub fn with_scope(mut self, scope: ComplementarityScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn validate(&self, config: &AuctionConfig) -> Result<()> {
        if self.setting == Setting::C && config.bidders() != 2 {
            return Err(Error::config(format!(
                "setting C is defined for exactly 2 bidders, got {}",
                config.bidders()
            )));
        }
        Ok(())
    }

    /// Item value range of one bidder.
    pub fn item_range(&self, bidder: usize) -> (f64, f64) {
        match (self.setting, bidder) {
            (Setting::A, _) => (0.0, 1.0),
            (Setting::B, _) | (Setting::C, 0) => (1.0, 2.0),
            (Setting::C, _) => (1.0, 5.0),
        }
    }

    fn complements(&self, size: usize) -> bool {
        match self.setting {
            Setting::A => false,
            _ => size > 1 || self.scope == ComplementarityScope::AllBundles,
        }
    }

    /// Per-bidder, per-bundle bounds of the valuation support.
    pub fn support(&self, config: &AuctionConfig) -> Result<SupportBox> {
        self.validate(config)?;
        let (n, k) = (config.bidders(), config.bundles());
        let mut lower = Vec::with_capacity(n * k);
        let mut upper = Vec::with_capacity(n * k);
        for i in 0..n {
            let (lo, hi) = self.item_range(i);
            for s in 0..k {
                let size = config.bundle_size(s);
                let c = if self.complements(size) { 1.0 } else { 0.0 };
                lower.push((size as f64 * lo - c).max(0.0));
                upper.push(size as f64 * hi + c);
            }
        }
        Ok(SupportBox {
            bidders: n,
            bundles: k,
            lower,
            upper,
        })
    }

    pub fn sample(&self, config: &AuctionConfig, count: usize, rng: &mut impl Rng) -> Result<ValuationProfile> {
        self.validate(config)?;
        let (n, m, k) = (config.bidders(), config.items(), config.bundles());
        let mut values = Vec::with_capacity(count * n * k);
        let mut item_values = vec![0.0; m];
        for _ in 0..count {
            for i in 0..n {
                let (lo, hi) = self.item_range(i);
                for v in item_values.iter_mut() {
                    *v = rng.gen_range(lo..hi);
                }
                for s in 0..k {
                    let mask = config.bundle_mask(s);
                    let mut v: f64 = (0..m).filter(|j| mask >> j & 1 == 1).map(|j| item_values[j]).sum();
                    if self.complements(mask.count_ones() as usize) {
                        v += rng.gen_range(-1.0..1.0);
                    }
                    values.push(v);
                }
            }
        }
        Ok(ValuationProfile {
            config: *config,
            distribution: *self,
            count,
            values,
        })
    }
}

/// Shorthand for sampling from a setting with the default complementarity
/// scope.
pub fn sample_profiles(
    setting: Setting,
    config: &AuctionConfig,
    count: usize,
    rng: &mut impl Rng,
) -> Result<ValuationProfile> {
    Distribution::new(setting).sample(config, count, rng)
}

/// Elementwise bounds over an n×k bid matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportBox {
    pub bidders: usize,
    pub bundles: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SupportBox {
    /// The non-negative orthant.
    pub fn nonnegative(config: &AuctionConfig) -> Self {
        let len = config.bidders() * config.bundles();
        SupportBox {
            bidders: config.bidders(),
            bundles: config.bundles(),
            lower: vec![0.0; len],
            upper: vec![f64::INFINITY; len],
        }
    }

    /// Clamps a batch laid out as [.., n, k] in place.
    pub fn project(&self, data: &mut [f64]) {
        let len = self.lower.len();
        for (x, idx) in data.iter_mut().zip((0..len).cycle()) {
            *x = x.clamp(self.lower[idx], self.upper[idx]);
        }
    }

    pub fn contains(&self, data: &[f64]) -> bool {
        let len = self.lower.len();
        data.iter()
            .zip((0..len).cycle())
            .all(|(&x, idx)| x >= self.lower[idx] && x <= self.upper[idx])
    }
}

/// A batch of valuation profiles, laid out [batch, bidder, bundle].
#[derive(Clone, Debug, PartialEq)]
pub struct ValuationProfile {
    config: AuctionConfig,
    distribution: Distribution,
    count: usize,
    values: Vec<f64>,
}

impl ValuationProfile {
    pub fn from_values(config: AuctionConfig, distribution: Distribution, values: Vec<f64>) -> Result<Self> {
        let per = config.bidders() * config.bundles();
        if values.len() % per != 0 {
            return Err(Error::Format(format!(
                "{} values is not a multiple of {per}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Format(format!(
                "valuation {v} is not a finite non-negative number"
            )));
        }
        Ok(ValuationProfile {
            config,
            distribution,
            count: values.len() / per,
            values,
        })
    }

    pub fn config(&self) -> &AuctionConfig {
        &self.config
    }

    pub fn distribution(&self) -> &Distribution {
        &self.distribution
    }

    pub fn setting(&self) -> Setting {
        self.distribution.setting
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The n×k matrix of one profile.
    pub fn profile(&self, index: usize) -> &[f64] {
        let per = self.config.bidders() * self.config.bundles();
        &self.values[index * per..(index + 1) * per]
    }

    pub fn bidder(&self, index: usize, bidder: usize) -> &[f64] {
        let k = self.config.bundles();
        &self.profile(index)[bidder * k..(bidder + 1) * k]
    }

    /// Profiles `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> ValuationProfile {
        let per = self.config.bidders() * self.config.bundles();
        ValuationProfile {
            config: self.config,
            distribution: self.distribution,
            count: end - start,
            values: self.values[start * per..end * per].to_vec(),
        }
    }

    /// Gathers the given profile indices into a new batch.
    pub fn gather(&self, indices: &[usize]) -> ValuationProfile {
        let mut values = Vec::with_capacity(indices.len() * self.config.bidders() * self.config.bundles());
        for &i in indices {
            values.extend_from_slice(self.profile(i));
        }
        ValuationProfile {
            config: self.config,
            distribution: self.distribution,
            count: indices.len(),
            values,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.count, self.config.bidders(), self.config.bundles()],
            self.values.clone(),
        )
        .expect("profile layout")
    }

    /// Writes `profile,bidder,bundle,value` rows for the first `limit`
    /// profiles. The bundle column is the bitmask.
    pub fn write_csv<W: Write>(&self, out: W, limit: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["profile", "bidder", "bundle", "value"])?;
        for p in 0..self.count.min(limit) {
            for i in 0..self.config.bidders() {
                for (s, v) in self.bidder(p, i).iter().enumerate() {
                    w.write_record(&[
                        p.to_string(),
                        i.to_string(),
                        self.config.bundle_mask(s).to_string(),
                        format!("{v}"),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("csv", e))?;
        Ok(())
    }

    /// Compact cache format: magic, version, setting, scope, n, m, count,
    /// then little-endian f64 values.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&BINARY_VERSION.to_le_bytes())?;
        out.write_all(&[
            setting_code(self.distribution.setting),
            scope_code(self.distribution.scope),
        ])?;
        out.write_all(&(self.config.bidders() as u32).to_le_bytes())?;
        out.write_all(&(self.config.items() as u32).to_le_bytes())?;
        out.write_all(&(self.count as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<valuation cache>", e))?;
        let header = BINARY_MAGIC.len() + 4 + 2 + 4 + 4 + 8;
        if bytes.len() < header || &bytes[..4] != BINARY_MAGIC {
            return Err(Error::Format("not a valuation cache".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != BINARY_VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let setting = setting_from_code(bytes[8])?;
        let scope = scope_from_code(bytes[9])?;
        let config = AuctionConfig::new(u32_at(10) as usize, u32_at(14) as usize)?;
        let count = u64::from_le_bytes(bytes[18..26].try_into().unwrap()) as usize;
        let expected = count * config.bidders() * config.bundles();
        let body = &bytes[header..];
        if body.len() != expected * 8 {
            return Err(Error::Format(format!(
                "cache body holds {} bytes, header promises {} values",
                body.len(),
                expected
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ValuationProfile::from_values(config, Distribution { setting, scope }, values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(std::io::BufReader::new(file))
    }
}

const BINARY_MAGIC: &[u8; 4] = b"CAVP";
const BINARY_VERSION: u32 = 1;

fn setting_code(s: Setting) -> u8 {
    match s {
        Setting::A => b'A',
        Setting::B => b'B',
        Setting::C => b'C',
    }
}

fn setting_from_code(c: u8) -> Result<Setting> {
    match c {
        b'A' => Ok(Setting::A),
        b'B' => Ok(Setting::B),
        b'C' => Ok(Setting::C),
        _ => Err(Error::Format(format!("bad setting code {c}"))),
    }
}

fn scope_code(s: ComplementarityScope) -> u8 {
    match s {
        ComplementarityScope::MultiItem => 0,
        ComplementarityScope::AllBundles => 1,
    }
}

fn scope_from_code(c: u8) -> Result<ComplementarityScope> {
    match c {
        0 => Ok(ComplementarityScope::MultiItem),
        1 => Ok(ComplementarityScope::AllBundles),
        _ => Err(Error::Format(format!("bad scope code {c}"))),
    }
}

/// Quasi-linear utility of one bidder for a (possibly randomized) allocation row.
pub fn utility(values: &[f64], allocation: &[f64], payment: f64) -> f64 {
    debug_assert_eq!(values.len(), allocation.len());
    values.iter().zip(allocation).map(|(v, z)| v * z).sum::<f64>() - payment
}

pub fn revenue(payments: &[f64]) -> f64 {
    payments.iter().sum()
}

/// Mean over profiles of total payments; `payments` is laid out [batch, n].
pub fn mean_revenue(payments: &[f64], bidders: usize) -> f64 {
    let count = payments.len() / bidders;
    if count == 0 {
        return 0.0;
    }
    payments.iter().sum::<f64>() / count as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Violation {
    /// Total probability mass on bundles containing the item exceeds one.
    Item { item: usize, mass: f64 },
    /// A bidder's total allocation exceeds one.
    Bidder { bidder: usize, mass: f64 },
    /// An entry outside [0, 1].
    Entry { bidder: usize, bundle: usize, value: f64 },
}

impl Violation {
    /// Distance past the admissible bound.
    pub fn magnitude(&self) -> f64 {
        match *self {
            Violation::Item { mass, .. } | Violation::Bidder { mass, .. } => mass - 1.0,
            Violation::Entry { value, .. } => {
                if value < 0.0 {
                    -value
                } else {
                    value - 1.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
    /// Largest excess over any bound, violations or not (0 when every
    /// constraint has slack).
    pub max_excess: f64,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks one n×k allocation against the item, bidder and entry constraints.
pub fn check_feasibility(z: &[f64], config: &AuctionConfig, tol: f64) -> FeasibilityReport {
    let (n, m, k) = (config.bidders(), config.items(), config.bundles());
    assert_eq!(z.len(), n * k, "allocation must be n×k");
    let mut report = FeasibilityReport::default();
    let excess = |report: &mut FeasibilityReport, amount: f64, v: Violation| {
        report.max_excess = report.max_excess.max(amount);
        if amount > tol {
            report.violations.push(v);
        }
    };
    for i in 0..n {
        for s in 0..k {
            let value = z[i * k + s];
            excess(
                &mut report,
                (-value).max(value - 1.0),
                Violation::Entry {
                    bidder: i,
                    bundle: s,
                    value,
                },
            );
        }
    }
    for j in 0..m {
        let mass: f64 = (0..n)
            .flat_map(|i| (0..k).map(move |s| (i, s)))
            .filter(|&(_, s)| config.bundle_mask(s) >> j & 1 == 1)
            .map(|(i, s)| z[i * k + s])
            .sum();
        excess(&mut report, mass - 1.0, Violation::Item { item: j, mass });
    }
    for i in 0..n {
        let mass: f64 = z[i * k..(i + 1) * k].iter().sum();
        excess(&mut report, mass - 1.0, Violation::Bidder { bidder: i, mass });
    }
    report
}

/// One bundle (as a bitmask) or nothing per bidder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeterministicAllocation {
    pub bundles: Vec<Option<u32>>,
}

impl DeterministicAllocation {
    pub fn empty(bidders: usize) -> Self {
        DeterministicAllocation {
            bundles: vec![None; bidders],
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut used = 0u32;
        for mask in self.bundles.iter().flatten() {
            if used & mask != 0 {
                return false;
            }
            used |= mask;
        }
        true
    }

    /// The 0/1 allocation matrix, n×k.
    pub fn to_matrix(&self, config: &AuctionConfig) -> Vec<f64> {
        let k = config.bundles();
        let mut z = vec![0.0; self.bundles.len() * k];
        for (i, b) in self.bundles.iter().enumerate() {
            if let Some(mask) = b {
                z[i * k + config.bundle_index(*mask)] = 1.0;
            }
        }
        z
    }

    /// Per-bidder bundle sizes, 0 for bidders who receive nothing.
    pub fn sizes(&self) -> Vec<usize> {
        self.bundles
            .iter()
            .map(|b| b.map_or(0, |m| m.count_ones() as usize))
            .collect()
    }
}

/// Every deterministic feasible allocation, starting with the empty one.
/// Bidders are assigned in order; each takes nothing or a bundle disjoint
/// from those already taken, in ascending bitmask order.
pub fn enumerate_feasible_allocations(config: &AuctionConfig) -> Result<Vec<DeterministicAllocation>> {
    if config.bidders() > ENUMERATION_MAX_BIDDERS || config.items() > ENUMERATION_MAX_ITEMS {
        return Err(Error::Guard(format!(
            "allocation enumeration limited to n ≤ {ENUMERATION_MAX_BIDDERS}, m ≤ {ENUMERATION_MAX_ITEMS}; got {config}"
        )));
    }
    let mut out = Vec::new();
    let mut current = vec![None; config.bidders()];
    fill(config, 0, 0, &mut current, &mut out);
    Ok(out)
}

fn fill(
    config: &AuctionConfig,
    bidder: usize,
    used: u32,
    current: &mut Vec<Option<u32>>,
    out: &mut Vec<DeterministicAllocation>,
) {
    if bidder == config.bidders() {
        out.push(DeterministicAllocation {
            bundles: current.clone(),
        });
        return;
    }
    current[bidder] = None;
    fill(config, bidder + 1, used, current, out);
    for s in 0..config.bundles() {
        let mask = config.bundle_mask(s);
        if mask & used == 0 {
            current[bidder] = Some(mask);
            fill(config, bidder + 1, used | mask, current, out);
        }
    }
    current[bidder] = None;
}
