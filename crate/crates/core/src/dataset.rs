//! Dataset ingestion and the simulated black box.
//!
//! A CSV file plus a [`DatasetSchema`] becomes a [`Population`]: per-stratum row and
//! positive-label counts together with the derived [`GroundTruth`]. Dataset labels
//! stand in for model responses, so answering a query for stratum `k` means drawing
//! one row of that stratum uniformly at random (with replacement) and returning its
//! label.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    bernoulli_sigma, product_weight, project_index, stratum_bit, GroundTruth, QueryCell,
    StratumId, MAX_ATTRIBUTES,
};
use crate::error::{Error, Result};

/// Comparison used by numeric binarization thresholds and row filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn numeric(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub op: CmpOp,
    pub value: f64,
}

/// What to do with a row whose attribute value is missing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    #[default]
    Drop,
    /// Treat a missing value as the 0 class (e.g. "N/A" grouped with other codes).
    Negative,
}

/// How one raw column becomes a binary protected attribute.
///
/// Either `positive_values` lists the raw values mapped to 1, or `threshold`
/// maps numeric values satisfying the comparison to 1. Everything else is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub source_column: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub positive_values: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<Threshold>,
    #[serde(default)]
    pub missing: MissingPolicy,
}

impl AttributeSchema {
    fn validate(&self) -> Result<()> {
        match (self.positive_values.is_empty(), &self.threshold) {
            (true, None) => Err(Error::Schema(format!(
                "attribute '{}' needs positive_values or a threshold",
                self.name
            ))),
            (false, Some(_)) => Err(Error::Schema(format!(
                "attribute '{}' sets both positive_values and a threshold",
                self.name
            ))),
            _ => Ok(()),
        }
    }

    fn binarize(&self, raw: &str) -> Result<bool> {
        match &self.threshold {
            Some(t) => {
                let v = parse_number(raw, &self.source_column)?;
                Ok(t.op.numeric(v, t.value))
            }
            None => Ok(self.positive_values.contains(raw)),
        }
    }
}

/// Row filter applied before binarization; rows failing any filter are skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowFilter {
    pub column: String,
    pub op: CmpOp,
    pub value: String,
}

impl RowFilter {
    fn keep(&self, raw: &str) -> Result<bool> {
        match self.op {
            CmpOp::Eq | CmpOp::Ne => {
                let equal = match (raw.parse::<f64>(), self.value.parse::<f64>()) {
                    (Ok(a), Ok(b)) => a == b,
                    _ => raw == self.value,
                };
                Ok(equal == (self.op == CmpOp::Eq))
            }
            op => {
                let rhs = parse_number(&self.value, &self.column)?;
                Ok(op.numeric(parse_number(raw, &self.column)?, rhs))
            }
        }
    }
}

fn parse_number(raw: &str, column: &str) -> Result<f64> {
    raw.parse::<f64>()
        .map_err(|_| Error::Ingest(format!("column '{column}': '{raw}' is not numeric")))
}

fn default_missing_tokens() -> Vec<String> {
    vec![String::new()]
}

/// Binarization rules for a whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    #[serde(default)]
    pub name: String,
    pub label_column: String,
    pub label_positive_values: BTreeSet<String>,
    #[serde(default = "default_missing_tokens")]
    pub missing_values: Vec<String>,
    #[serde(default)]
    pub filters: Vec<RowFilter>,
    pub attributes: Vec<AttributeSchema>,
}

const BUNDLED_SCHEMAS: &[(&str, &str)] = &[
    ("propublica", include_str!("../../../schemas/propublica.toml")),
    ("german_credit", include_str!("../../../schemas/german_credit.toml")),
    (
        "folktables_public_coverage",
        include_str!("../../../schemas/folktables_public_coverage.toml"),
    ),
];

impl DatasetSchema {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let schema: Self = toml::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Names of the schemas shipped with the crate.
    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED_SCHEMAS.iter().map(|(n, _)| *n)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        BUNDLED_SCHEMAS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Schema(format!("no bundled schema named '{name}'")))
            .and_then(|(_, text)| Self::from_toml_str(text))
    }

    /// A bundled schema name, or otherwise a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if BUNDLED_SCHEMAS.iter().any(|(n, _)| *n == name_or_path) {
            Self::bundled(name_or_path)
        } else if Path::new(name_or_path).is_file() {
            Self::load(name_or_path)
        } else {
            Err(Error::Schema(format!(
                "'{name_or_path}' is neither a bundled schema ({}) nor a schema file",
                Self::bundled_names().collect::<Vec<_>>().join(", ")
            )))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() || self.attributes.len() > MAX_ATTRIBUTES {
            return Err(Error::Schema(format!(
                "schema needs 1..={MAX_ATTRIBUTES} attributes, got {}",
                self.attributes.len()
            )));
        }
        if self.label_positive_values.is_empty() {
            return Err(Error::Schema("label_positive_values is empty".into()));
        }
        let mut names = BTreeSet::new();
        for attr in &self.attributes {
            attr.validate()?;
            if !names.insert(attr.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate attribute name '{}'",
                    attr.name
                )));
            }
            if attr.source_column == self.label_column {
                return Err(Error::Schema(format!(
                    "attribute '{}' reads the label column '{}'",
                    attr.name, self.label_column
                )));
            }
        }
        Ok(())
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }
}

/// Row accounting for one ingestion.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub rows_read: u64,
    pub rows_filtered: u64,
    pub rows_missing: u64,
    pub rows_used: u64,
}

/// An ingested dataset acting as the audited black box.
#[derive(Clone, Debug)]
pub struct Population {
    name: String,
    attribute_names: Vec<String>,
    counts: Vec<u64>,
    positives: Vec<u64>,
    ground_truth: GroundTruth,
    report: IngestReport,
}

impl Population {
    pub fn from_counts(
        name: impl Into<String>,
        attribute_names: Vec<String>,
        counts: Vec<u64>,
        positives: Vec<u64>,
    ) -> Result<Self> {
        let m = attribute_names.len();
        let ground_truth = GroundTruth::from_counts(m, &counts, &positives)?;
        let used = counts.iter().sum();
        Ok(Self {
            name: name.into(),
            attribute_names,
            counts,
            positives,
            ground_truth,
            report: IngestReport {
                rows_read: used,
                rows_used: used,
                ..Default::default()
            },
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attribute_names.iter().position(|n| n == name)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn positives(&self) -> &[u64] {
        &self.positives
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.ground_truth
    }

    pub fn report(&self) -> &IngestReport {
        &self.report
    }

    pub fn empty_strata(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&k| self.counts[k] == 0).collect()
    }

    /// Keep only the listed attributes (in that order), pooling the rows of the
    /// strata that become indistinguishable.
    pub fn project(&self, attrs: &[usize]) -> Result<Self> {
        if attrs.is_empty() || attrs.len() > MAX_ATTRIBUTES {
            return Err(Error::Config("attribute subset must be non-empty".into()));
        }
        let mut seen = BTreeSet::new();
        for &a in attrs {
            if a >= self.num_attributes() {
                return Err(Error::Config(format!(
                    "attribute {a} out of range for {} attributes",
                    self.num_attributes()
                )));
            }
            if !seen.insert(a) {
                return Err(Error::Config(format!("attribute {a} listed twice")));
            }
        }
        let mut counts = vec![0u64; 1 << attrs.len()];
        let mut positives = vec![0u64; 1 << attrs.len()];
        for k in 0..self.counts.len() {
            let sub = project_index(k, attrs);
            counts[sub] += self.counts[k];
            positives[sub] += self.positives[k];
        }
        let names = attrs
            .iter()
            .map(|&a| self.attribute_names[a].clone())
            .collect();
        let mut projected = Self::from_counts(self.name.clone(), names, counts, positives)?;
        projected.report = self.report.clone();
        Ok(projected)
    }

    /// Label of one row drawn uniformly with replacement from `stratum`.
    pub fn respond<R: Rng + ?Sized>(&self, stratum: StratumId, rng: &mut R) -> Result<bool> {
        if stratum.num_attributes() != self.num_attributes() {
            return Err(Error::Oracle(format!(
                "stratum over {} attributes queried on a {}-attribute population",
                stratum.num_attributes(),
                self.num_attributes()
            )));
        }
        self.respond_index(stratum.index(), rng)
    }

    pub(crate) fn respond_index<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<bool> {
        let n = self.counts[k];
        if n == 0 {
            return Err(Error::Oracle(format!("stratum {k} is empty in the population")));
        }
        // rows are conceptually ordered positives first
        Ok(rng.gen_range(0..n) < self.positives[k])
    }
}

/// Parse a CSV stream and bin every usable row into its stratum.
pub fn ingest<R: Read>(source: R, schema: &DatasetSchema) -> Result<Population> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in CSV header")))
    };
    let label_idx = column(&schema.label_column)?;
    let attr_idx = schema
        .attributes
        .iter()
        .map(|a| column(&a.source_column))
        .collect::<Result<Vec<_>>>()?;
    let filter_idx = schema
        .filters
        .iter()
        .map(|f| column(&f.column))
        .collect::<Result<Vec<_>>>()?;

    let m = schema.attributes.len();
    let mut counts = vec![0u64; 1 << m];
    let mut positives = vec![0u64; 1 << m];
    let mut report = IngestReport::default();
    let is_missing = |v: &str| schema.missing_values.iter().any(|t| t == v);

    'rows: for record in reader.records() {
        let record = record?;
        report.rows_read += 1;
        for (filter, &idx) in schema.filters.iter().zip(&filter_idx) {
            let raw = record.get(idx).unwrap_or("");
            if is_missing(raw) || !filter.keep(raw)? {
                report.rows_filtered += 1;
                continue 'rows;
            }
        }
        let label_raw = record.get(label_idx).unwrap_or("");
        if is_missing(label_raw) {
            report.rows_missing += 1;
            continue;
        }
        let mut k = 0usize;
        for (j, (attr, &idx)) in schema.attributes.iter().zip(&attr_idx).enumerate() {
            let raw = record.get(idx).unwrap_or("");
            let bit = if is_missing(raw) {
                match attr.missing {
                    MissingPolicy::Drop => {
                        report.rows_missing += 1;
                        continue 'rows;
                    }
                    MissingPolicy::Negative => false,
                }
            } else {
                attr.binarize(raw)?
            };
            k |= usize::from(bit) << j;
        }
        counts[k] += 1;
        positives[k] += u64::from(schema.label_positive_values.contains(label_raw));
        report.rows_used += 1;
    }

    if report.rows_used == 0 {
        return Err(Error::Ingest(format!(
            "no usable rows ({} read, {} filtered, {} with missing values)",
            report.rows_read, report.rows_filtered, report.rows_missing
        )));
    }
    for (j, attr) in schema.attributes.iter().enumerate() {
        let ones: u64 = (0..counts.len())
            .filter(|&k| stratum_bit(k, j))
            .map(|k| counts[k])
            .sum();
        if ones == 0 || ones == report.rows_used {
            return Err(Error::Schema(format!(
                "attribute '{}' is constant after binarization",
                attr.name
            )));
        }
    }

    let mut population = Population::from_counts(
        schema.name.clone(),
        schema.attribute_names(),
        counts,
        positives,
    )?;
    population.report = report;
    Ok(population)
}

pub fn ingest_path(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Population> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::Ingest(format!("cannot open '{}': {e}", path.as_ref().display()))
    })?;
    ingest(std::io::BufReader::new(file), schema)
}

/// `sqrt(q (1 - q))` with `q = P(Y = 1 | X_attr = value)`.
pub fn ground_truth_sigma(gt: &GroundTruth, attr: usize, value: bool) -> Result<f64> {
    if attr >= gt.num_attributes() {
        return Err(Error::Config(format!("attribute {attr} out of range")));
    }
    if gt.group_prob(attr, value) <= 0.0 {
        return Err(Error::Domain(format!(
            "group X_{attr}={} has zero probability",
            u8::from(value)
        )));
    }
    Ok(bernoulli_sigma(gt.group_rate(attr, value)?))
}

/// Distribution of the attribute bits that a query does not pin down.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryModel {
    /// Draw free bits from the population's joint distribution, conditioned on the
    /// pinned bits. Equivalent to drawing a random matching row.
    #[default]
    Joint,
    /// Draw each free bit independently from its marginal, rejecting empty strata.
    Independent,
}

impl std::str::FromStr for QueryModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "joint" => Ok(Self::Joint),
            "independent" => Ok(Self::Independent),
            other => Err(Error::Config(format!("unknown query model '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
struct StratumTable {
    strata: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl StratumTable {
    fn build(candidates: impl Iterator<Item = usize>, weight: impl Fn(usize) -> f64) -> Option<Self> {
        let (strata, weights): (Vec<usize>, Vec<f64>) = candidates
            .map(|k| (k, weight(k)))
            .filter(|&(_, w)| w > 0.0)
            .unzip();
        let dist = WeightedIndex::new(&weights).ok()?;
        Some(Self { strata, dist })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.strata[self.dist.sample(rng)]
    }
}

/// Resolves query cells into concrete strata and asks the population for labels.
#[derive(Clone, Debug)]
pub struct QuerySampler<'a> {
    population: &'a Population,
    any: Option<StratumTable>,
    groups: Vec<[Option<StratumTable>; 2]>,
}

impl<'a> QuerySampler<'a> {
    pub fn new(population: &'a Population, model: QueryModel) -> Self {
        let m = population.num_attributes();
        let n = 1usize << m;
        let marginals = population.ground_truth().attr_marginal();
        let populated = |k: usize| population.counts[k] > 0;
        let weight = |k: usize, skip: Option<usize>| -> f64 {
            if !populated(k) {
                return 0.0;
            }
            match model {
                QueryModel::Joint => population.counts[k] as f64,
                QueryModel::Independent => product_weight(marginals, k, skip),
            }
        };
        let any = StratumTable::build(0..n, |k| weight(k, None));
        let groups = (0..m)
            .map(|attr| {
                [false, true].map(|value| {
                    StratumTable::build(
                        (0..n).filter(|&k| stratum_bit(k, attr) == value),
                        |k| weight(k, Some(attr)),
                    )
                })
            })
            .collect();
        Self {
            population,
            any,
            groups,
        }
    }

    pub fn population(&self) -> &Population {
        self.population
    }

    /// Pick the stratum a query for `cell` is sent to.
    pub fn draw_stratum<R: Rng + ?Sized>(&self, cell: QueryCell, rng: &mut R) -> Result<usize> {
        match cell {
            QueryCell::Population => self
                .any
                .as_ref()
                .map(|t| t.sample(rng))
                .ok_or_else(|| Error::Oracle("population has no populated stratum".into())),
            QueryCell::Group { attr, value } => self
                .groups
                .get(attr)
                .and_then(|g| g[usize::from(value)].as_ref())
                .map(|t| t.sample(rng))
                .ok_or_else(|| {
                    Error::Oracle(format!(
                        "group X_{attr}={} has no populated stratum",
                        u8::from(value)
                    ))
                }),
            QueryCell::Stratum(k) => {
                if k < self.population.counts.len() && self.population.counts[k] > 0 {
                    Ok(k)
                } else {
                    Err(Error::Oracle(format!("stratum {k} is empty in the population")))
                }
            }
        }
    }

    /// Send one query: returns the stratum it landed in and the black-box response.
    pub fn query<R: Rng + ?Sized>(&self, cell: QueryCell, rng: &mut R) -> Result<(usize, bool)> {
        let k = self.draw_stratum(cell, rng)?;
        Ok((k, self.population.respond_index(k, rng)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_schema() -> DatasetSchema {
        DatasetSchema::from_toml_str(
            r#"
            name = "toy"
            label_column = "y"
            label_positive_values = ["1"]
            [[attributes]]
            name = "g"
            source_column = "group"
            positive_values = ["a"]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn four_row_toy_by_hand() {
        let csv = "group,y\na,1\nb,1\na,0\nb,0\n";
        let pop = ingest(csv.as_bytes(), &toy_schema()).unwrap();
        let gt = pop.ground_truth();
        assert_eq!(gt.attr_marginal(), &[0.5]);
        // group a: 1 of 2 positive, group b: 1 of 2 positive
        assert_eq!(gt.true_dp(), &[0.0]);
        assert_eq!(pop.counts(), &[2, 2]);
        assert_eq!(pop.report().rows_used, 4);
    }

    #[test]
    fn four_row_toy_with_disparity() {
        let csv = "group,y\na,1\na,1\nb,0\nb,1\n";
        let pop = ingest(csv.as_bytes(), &toy_schema()).unwrap();
        // P(Y=1|a) = 1, P(Y=1|b) = 1/2
        assert!((pop.ground_truth().true_dp()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "grp,y\na,1\nb,0\n";
        match ingest(csv.as_bytes(), &toy_schema()) {
            Err(Error::Schema(msg)) => assert!(msg.contains("group")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_attribute_rejected() {
        let csv = "group,y\na,1\na,0\n";
        assert!(matches!(
            ingest(csv.as_bytes(), &toy_schema()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn zero_rows_rejected() {
        let csv = "group,y\n,1\n";
        assert!(matches!(
            ingest(csv.as_bytes(), &toy_schema()),
            Err(Error::Ingest(_))
        ));
    }

    #[test]
    fn missing_values_dropped_and_counted() {
        let csv = "group,y\na,1\n,1\nb,\nb,0\n";
        let pop = ingest(csv.as_bytes(), &toy_schema()).unwrap();
        assert_eq!(pop.report().rows_missing, 2);
        assert_eq!(pop.report().rows_used, 2);
    }

    #[test]
    fn filters_and_thresholds() {
        let schema = DatasetSchema::from_toml_str(
            r#"
            label_column = "y"
            label_positive_values = ["1"]
            [[filters]]
            column = "keep"
            op = "ne"
            value = "O"
            [[attributes]]
            name = "young"
            source_column = "age"
            threshold = { op = "lt", value = 25 }
            "#,
        )
        .unwrap();
        let csv = "age,keep,y\n20,F,1\n30,F,0\n22,O,1\n40,M,1\n";
        let pop = ingest(csv.as_bytes(), &schema).unwrap();
        assert_eq!(pop.report().rows_filtered, 1);
        assert_eq!(pop.counts(), &[2, 1]);
    }

    #[test]
    fn schema_validation() {
        let dup = r#"
            label_column = "y"
            label_positive_values = ["1"]
            [[attributes]]
            name = "a"
            source_column = "c1"
            positive_values = ["1"]
            [[attributes]]
            name = "a"
            source_column = "c2"
            positive_values = ["1"]
        "#;
        assert!(matches!(DatasetSchema::from_toml_str(dup), Err(Error::Schema(_))));
        let label_as_attr = r#"
            label_column = "y"
            label_positive_values = ["1"]
            [[attributes]]
            name = "a"
            source_column = "y"
            positive_values = ["1"]
        "#;
        assert!(matches!(
            DatasetSchema::from_toml_str(label_as_attr),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn bundled_schemas_parse() {
        for name in DatasetSchema::bundled_names() {
            let s = DatasetSchema::bundled(name).unwrap();
            assert_eq!(s.attributes.len(), 5, "{name}");
        }
    }

    #[test]
    fn deterministic_strata_respond_constantly() {
        let pop = Population::from_counts("t", vec!["a".into()], vec![5, 7], vec![0, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert!(!pop.respond(StratumId::new(0, 1).unwrap(), &mut rng).unwrap());
            assert!(pop.respond(StratumId::new(1, 1).unwrap(), &mut rng).unwrap());
        }
    }

    #[test]
    fn empty_stratum_is_an_oracle_error() {
        let pop = Population::from_counts("t", vec!["a".into()], vec![0, 7], vec![0, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            pop.respond(StratumId::new(0, 1).unwrap(), &mut rng),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn respond_converges_to_stratum_rate() {
        let pop =
            Population::from_counts("t", vec!["a".into()], vec![1000, 10], vec![300, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| pop.respond(StratumId::new(0, 1).unwrap(), &mut rng).unwrap())
            .count();
        let mean = hits as f64 / n as f64;
        let se = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((mean - 0.3).abs() < 0.01);
        assert!((mean - 0.3).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn same_seed_same_responses() {
        let pop =
            Population::from_counts("t", vec!["a".into()], vec![100, 100], vec![30, 60]).unwrap();
        let sampler = QuerySampler::new(&pop, QueryModel::Joint);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..500)
                .map(|_| sampler.query(QueryCell::Population, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn sigma_examples() {
        let fair = GroundTruth::synthetic(&[0.5], &[0.5, 0.5]).unwrap();
        assert!((ground_truth_sigma(&fair, 0, true).unwrap() - 0.5).abs() < 1e-15);
        let det = GroundTruth::synthetic(&[0.5], &[0.2, 0.0]).unwrap();
        assert!((ground_truth_sigma(&det, 0, false).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(ground_truth_sigma(&det, 0, true).unwrap(), 0.0);
        let tenth = GroundTruth::synthetic(&[0.5], &[0.5, 0.1]).unwrap();
        assert!((ground_truth_sigma(&tenth, 0, true).unwrap() - 0.3).abs() < 1e-15);
        let degenerate = GroundTruth::synthetic(&[1.0], &[0.5, 0.1]).unwrap();
        assert!(matches!(
            ground_truth_sigma(&degenerate, 0, false),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn group_queries_respect_the_pinned_bit() {
        let pop = Population::from_counts(
            "t",
            vec!["a".into(), "b".into()],
            vec![10, 20, 30, 0],
            vec![1, 2, 3, 0],
        )
        .unwrap();
        for model in [QueryModel::Joint, QueryModel::Independent] {
            let sampler = QuerySampler::new(&pop, model);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..1000 {
                let k = sampler
                    .draw_stratum(QueryCell::Group { attr: 1, value: true }, &mut rng)
                    .unwrap();
                // stratum 3 is empty, so X_1 = 1 can only land in stratum 2
                assert_eq!(k, 2);
            }
        }
    }
}
