//! Corpus ingestion, subject-category labels and deterministic dataset splits.
//!
//! A corpus file is UTF-8 with one JSON object per line:
//!
//! ```text
//! {"id": "osti-1", "text": "Heavy water moderated reactors ...", "categories": [22, 73]}
//! ```
//!
//! Only the first category of a record is used. Records without categories
//! are admitted for pre-training only.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

/// OSTI subject categories and their nuclear-fuel-cycle designation.
const OSTI_CATEGORIES: &[(i64, &str, bool)] = &[
    (1, "Coal, Lignite, and Peat", false),
    (2, "Petroleum", false),
    (3, "Natural Gas", false),
    (4, "Oil Shales and Tar Sands", false),
    (5, "Nuclear Fuels", true),
    (7, "Isotope and Radiation Sources", true),
    (8, "Hydrogen", false),
    (9, "Biomass Fuels", false),
    (10, "Synthetic Fuels", false),
    (11, "Nuclear Fuel Cycle and Fuel Materials", true),
    (
        12,
        "Management of Radioactive and Non-Radioactive Wastes From Nuclear Facilities",
        true,
    ),
    (13, "Hydro Energy", false),
    (14, "Solar Energy", false),
    (15, "Geothermal Energy", false),
    (16, "Tidal and Wave Power", false),
    (17, "Wind Energy", false),
    (20, "Fossil-Fueled Power Plants", false),
    (21, "Specific Nuclear Reactors and Associated Plants", true),
    (22, "General Studies of Nuclear Reactors", true),
    (24, "Power Transmission and Distribution", false),
    (25, "Energy Storage", false),
    (29, "Energy Planning, Policy, and Economy", false),
    (30, "Direct Energy Conversion", false),
    (
        32,
        "Energy Conservation, Consumption, and Utilization",
        false,
    ),
    (33, "Advanced Propulsion Systems", false),
    (35, "Arms Control", false),
    (36, "Material Science", false),
    (
        37,
        "Inorganic, Organic, Physical and Analytical Chemistry",
        false,
    ),
    (
        38,
        "Radiation Chemistry, Radiochemistry, and Nuclear Chemistry",
        true,
    ),
    (39, "", false),
    (40, "Chemistry", false),
    (42, "Engineering", false),
    (43, "Particle Accelerators", false),
    (44, "", false),
    (
        45,
        "Military Technology, Weaponry, and National Defense",
        false,
    ),
    (
        46,
        "Instrumentation Related To Nuclear Science and Technology",
        true,
    ),
    (47, "Other Instrumentation", false),
    (54, "Environmental Sciences", false),
    (55, "", false),
    (56, "Biology and Medicine", false),
    (57, "", false),
    (58, "Geosciences", false),
    (59, "Basic Biological Sciences", false),
    (60, "Applied Life Sciences", false),
    (61, "Radiation Protection and Dosimetry", false),
    (62, "Radiology and Nuclear Medicine", false),
    (
        63,
        "Radiation, Thermal, and Other Environ. Pollutant Effects On Living Orgs. and Biol. Mat.",
        false,
    ),
    (66, "Physics", false),
    (70, "Plasma Physics and Fusion Technology", false),
    (
        71,
        "Classical and Quantum Mechanics, General Physics",
        false,
    ),
    (72, "Physics Of Elementary Particles and Fields", false),
    (73, "Nuclear Physics and Radiation Physics", true),
    (74, "Atomic and Molecular Physics", false),
    (
        75,
        "Condensed Matter Physics, Superconductivity and Superfluidity",
        false,
    ),
    (77, "Nanoscience and Nanotechnology", false),
    (79, "Astronomy and Astrophysics", false),
    (96, "Knowledge Management and Preservation", false),
    (97, "Mathematics and Computing", false),
    (
        98,
        "Nuclear Disarmament, Safeguards, and Physical Protection",
        false,
    ),
    (99, "General and Miscellaneous", false),
];

/// Which subject categories count as related to the nuclear fuel cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelScheme {
    pub nfc_categories: BTreeSet<i64>,
    pub all_categories: BTreeMap<i64, String>,
}

impl LabelScheme {
    /// The OSTI category table with its nine NFC-related codes.
    pub fn osti() -> Self {
        let all_categories = OSTI_CATEGORIES
            .iter()
            .map(|&(code, desc, _)| (code, desc.to_string()))
            .collect();
        let nfc_categories = OSTI_CATEGORIES
            .iter()
            .filter(|c| c.2)
            .map(|c| c.0)
            .collect();
        LabelScheme {
            nfc_categories,
            all_categories,
        }
    }

    pub fn new(
        nfc_categories: BTreeSet<i64>,
        all_categories: BTreeMap<i64, String>,
    ) -> Result<Self> {
        if let Some(code) = nfc_categories
            .iter()
            .find(|c| !all_categories.contains_key(c))
        {
            return Err(Error::UnknownCategory(*code));
        }
        Ok(LabelScheme {
            nfc_categories,
            all_categories,
        })
    }

    pub fn contains(&self, category: i64) -> bool {
        self.all_categories.contains_key(&category)
    }
}

impl Default for LabelScheme {
    fn default() -> Self {
        Self::osti()
    }
}

/// True iff `category` is one of the scheme's nuclear-fuel-cycle codes.
pub fn map_binary_label(category: i64, scheme: &LabelScheme) -> Result<bool> {
    if !scheme.contains(category) {
        return Err(Error::UnknownCategory(category));
    }
    Ok(scheme.nfc_categories.contains(&category))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub categories: Vec<i64>,
    pub primary_category: Option<i64>,
    pub nfc_label: Option<bool>,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        categories: Vec<i64>,
        scheme: &LabelScheme,
    ) -> Result<Self> {
        let id = id.into();
        let text = text.into();
        if id.is_empty() {
            return Err(invalid("document id is empty"));
        }
        if text.trim().is_empty() {
            return Err(invalid(format!("document {id:?} has empty text")));
        }
        let primary_category = categories.first().copied();
        let nfc_label = primary_category
            .map(|c| map_binary_label(c, scheme))
            .transpose()?;
        Ok(Document {
            id,
            text,
            categories,
            primary_category,
            nfc_label,
        })
    }

    pub fn is_labeled(&self) -> bool {
        self.primary_category.is_some()
    }
}

#[derive(Deserialize)]
struct Record {
    id: String,
    text: String,
    #[serde(default)]
    categories: Vec<i64>,
}

/// Reads a line-delimited corpus file. Blank lines are skipped.
pub fn load_corpus(path: &Path, scheme: &LabelScheme) -> Result<Vec<Document>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        let doc =
            Document::new(record.id, record.text, record.categories, scheme).map_err(|e| {
                Error::MalformedRecord {
                    line: line_no,
                    message: e.to_string(),
                }
            })?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::MalformedRecord {
                line: line_no,
                message: format!("duplicate id {:?}", doc.id),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Writes documents in the corpus line format.
pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        let record = serde_json::json!({
            "id": d.id,
            "text": d.text,
            "categories": d.categories,
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub pretrain_fraction: f64,
    pub finetune_fraction: f64,
    pub test_fraction: f64,
    pub validation_fraction_of_finetune: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            pretrain_fraction: 0.8,
            finetune_fraction: 0.1,
            test_fraction: 0.1,
            validation_fraction_of_finetune: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("pretrain_fraction", self.pretrain_fraction),
            ("finetune_fraction", self.finetune_fraction),
            ("test_fraction", self.test_fraction),
            (
                "validation_fraction_of_finetune",
                self.validation_fraction_of_finetune,
            ),
        ];
        let mut problems: Vec<String> = fractions
            .iter()
            .filter(|(_, f)| !(*f > 0.0 && *f < 1.0))
            .map(|(name, f)| format!("{name} must be in (0, 1), got {f}"))
            .collect();
        let sum = self.pretrain_fraction + self.finetune_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-12 {
            problems.push(format!("split fractions must sum to 1, got {sum}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Splits `total` items by floor-then-distribute: each share is floored and
/// the leftover items go one at a time to the shares in declaration order.
pub fn allocate_counts(total: usize, fractions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = fractions
        .iter()
        .map(|f| (f * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainder = total.saturating_sub(assigned);
    let mut i = 0;
    while remainder > 0 && !counts.is_empty() {
        counts[i % fractions.len()] += 1;
        remainder -= 1;
        i += 1;
    }
    counts
}

fn seeded_key(seed: u64, salt: &str, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.as_bytes());
    h.update([0u8]);
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Orders documents by a seeded hash of their ids. The order of any subset is
/// the restriction of the full order, so prefixes of it nest.
pub fn hash_order<'a>(docs: &[&'a Document], seed: u64, salt: &str) -> Vec<&'a Document> {
    let mut keyed: Vec<([u8; 32], &Document)> = docs
        .iter()
        .map(|d| (seeded_key(seed, salt, &d.id), *d))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    keyed.into_iter().map(|(_, d)| d).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplits {
    pub pretrain: Vec<Document>,
    pub finetune_train: Vec<Document>,
    pub finetune_validation: Vec<Document>,
    pub test: Vec<Document>,
}

pub const SPLIT_NAMES: [&str; 4] = ["pretrain", "finetune_train", "finetune_validation", "test"];

impl DatasetSplits {
    pub fn get(&self, name: &str) -> Result<&[Document]> {
        match name {
            "pretrain" => Ok(&self.pretrain),
            "finetune_train" => Ok(&self.finetune_train),
            "finetune_validation" | "validation" => Ok(&self.finetune_validation),
            "test" => Ok(&self.test),
            other => Err(invalid(format!(
                "unknown split {other:?}, expected one of {}",
                SPLIT_NAMES.join(", ")
            ))),
        }
    }

    fn parts(&self) -> [(&'static str, &[Document]); 4] {
        [
            ("pretrain", &self.pretrain),
            ("finetune_train", &self.finetune_train),
            ("finetune_validation", &self.finetune_validation),
            ("test", &self.test),
        ]
    }

    /// Writes one `<split>.txt` file per split listing document ids.
    pub fn write_manifests(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, docs) in self.parts() {
            let path = dir.join(format!("{name}.txt"));
            let mut body = String::new();
            for d in docs {
                body.push_str(&d.id);
                body.push('\n');
            }
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Rebuilds splits from manifests written by [`DatasetSplits::write_manifests`].
    pub fn from_manifests(docs: &[Document], dir: &Path) -> Result<Self> {
        let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
        let read = |name: &str| -> Result<Vec<Document>> {
            let path = dir.join(format!("{name}.txt"));
            let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            body.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|id| {
                    by_id.get(id.trim()).map(|d| (*d).clone()).ok_or_else(|| {
                        invalid(format!("{}: unknown document id {id:?}", path.display()))
                    })
                })
                .collect()
        };
        Ok(DatasetSplits {
            pretrain: read("pretrain")?,
            finetune_train: read("finetune_train")?,
            finetune_validation: read("finetune_validation")?,
            test: read("test")?,
        })
    }
}

/// Minimum corpus size that can populate every split.
pub const MIN_SPLIT_DOCUMENTS: usize = 10;

/// Partitions a corpus into pre-train, fine-tune (train and validation) and
/// test splits. Unlabeled documents only ever land in the pre-train split.
pub fn split_corpus(docs: &[Document], spec: &SplitSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    if docs.len() < MIN_SPLIT_DOCUMENTS {
        return Err(invalid(format!(
            "need at least {MIN_SPLIT_DOCUMENTS} documents to split, got {}",
            docs.len()
        )));
    }
    let counts = allocate_counts(
        docs.len(),
        &[
            spec.pretrain_fraction,
            spec.finetune_fraction,
            spec.test_fraction,
        ],
    );
    let (n_finetune, n_test) = (counts[1], counts[2]);

    let labeled: Vec<&Document> = docs.iter().filter(|d| d.is_labeled()).collect();
    if labeled.len() < n_finetune + n_test {
        return Err(invalid(format!(
            "need {} labeled documents for fine-tune and test splits, got {}",
            n_finetune + n_test,
            labeled.len()
        )));
    }
    let ordered = hash_order(&labeled, spec.seed, "split");
    let finetune_pool: Vec<&Document> = ordered[..n_finetune].to_vec();
    let test: Vec<Document> = ordered[n_finetune..n_finetune + n_test]
        .iter()
        .map(|d| (*d).clone())
        .collect();
    let held_out: BTreeSet<&str> = ordered[..n_finetune + n_test]
        .iter()
        .map(|d| d.id.as_str())
        .collect();
    let pretrain: Vec<Document> = docs
        .iter()
        .filter(|d| !held_out.contains(d.id.as_str()))
        .cloned()
        .collect();

    let pool_counts = allocate_counts(
        finetune_pool.len(),
        &[
            1.0 - spec.validation_fraction_of_finetune,
            spec.validation_fraction_of_finetune,
        ],
    );
    // Small pools would otherwise floor the validation share to nothing.
    let n_validation = if finetune_pool.len() >= 2 {
        pool_counts[1].max(1)
    } else {
        pool_counts[1]
    };
    let pool_order = hash_order(&finetune_pool, spec.seed, "validation");
    let validation_ids: BTreeSet<&str> = pool_order[pool_order.len() - n_validation..]
        .iter()
        .map(|d| d.id.as_str())
        .collect();
    let (finetune_validation, finetune_train): (Vec<&Document>, Vec<&Document>) = finetune_pool
        .iter()
        .partition(|d| validation_ids.contains(d.id.as_str()));

    let splits = DatasetSplits {
        pretrain,
        finetune_train: finetune_train.into_iter().cloned().collect(),
        finetune_validation: finetune_validation.into_iter().cloned().collect(),
        test,
    };
    if let Some((name, _)) = splits.parts().iter().find(|(_, d)| d.is_empty()) {
        return Err(invalid(format!("split {name} would be empty")));
    }
    Ok(splits)
}

/// Draws increasingly large nested subsets of `docs`. The subset for each
/// fraction `f` has `round(f * N)` documents and contains every smaller one.
pub fn nested_subsets(
    docs: &[Document],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<Document>>> {
    if fractions.is_empty() {
        return Err(invalid("fraction list is empty"));
    }
    for (i, &f) in fractions.iter().enumerate() {
        if !(f > 0.0 && f <= 1.0) {
            return Err(invalid(format!("fraction {f} outside (0, 1]")));
        }
        if i > 0 && f <= fractions[i - 1] {
            return Err(invalid(format!(
                "fractions must be strictly ascending: {} then {f}",
                fractions[i - 1]
            )));
        }
    }
    let refs: Vec<&Document> = docs.iter().collect();
    let order = hash_order(&refs, seed, "nested");
    fractions
        .iter()
        .map(|&f| {
            let n = (f * docs.len() as f64).round() as usize;
            if n == 0 {
                return Err(invalid(format!(
                    "fraction {f} of {} documents selects nothing",
                    docs.len()
                )));
            }
            Ok(order[..n].iter().map(|d| (*d).clone()).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, cats: Vec<i64>) -> Document {
        Document::new(id, format!("text of {id}"), cats, &LabelScheme::osti()).unwrap()
    }

    fn corpus(n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| doc(&format!("d{i}"), vec![if i % 3 == 0 { 5 } else { 79 }]))
            .collect()
    }

    #[test]
    fn label_map_examples() {
        let s = LabelScheme::osti();
        assert!(map_binary_label(5, &s).unwrap());
        assert!(!map_binary_label(1, &s).unwrap());
        assert!(map_binary_label(73, &s).unwrap());
        assert!(matches!(
            map_binary_label(6, &s),
            Err(Error::UnknownCategory(6))
        ));
    }

    #[test]
    fn nfc_codes_match_table() {
        let s = LabelScheme::osti();
        let nfc: Vec<i64> = s.nfc_categories.iter().copied().collect();
        assert_eq!(nfc, vec![5, 7, 11, 12, 21, 22, 38, 46, 73]);
        assert!(s
            .nfc_categories
            .iter()
            .all(|c| s.all_categories.contains_key(c)));
    }

    #[test]
    fn primary_category_is_first() {
        let d = doc("x", vec![5, 73]);
        assert_eq!(d.primary_category, Some(5));
        assert_eq!(d.nfc_label, Some(true));
        let d = doc("y", vec![]);
        assert!(!d.is_labeled());
        assert_eq!(d.nfc_label, None);
    }

    #[test]
    fn empty_text_rejected() {
        let err = Document::new("z", "   ", vec![5], &LabelScheme::osti()).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn full_scale_split_sizes() {
        let docs = corpus(1000);
        let s = split_corpus(&docs, &SplitSpec::with_seed(7)).unwrap();
        assert_eq!(s.pretrain.len(), 800);
        assert_eq!(s.finetune_train.len() + s.finetune_validation.len(), 100);
        assert_eq!(s.finetune_validation.len(), 10);
        assert_eq!(s.test.len(), 100);
        let again = split_corpus(&docs, &SplitSpec::with_seed(7)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn hundred_docs_gives_one_validation_doc() {
        let s = split_corpus(&corpus(100), &SplitSpec::with_seed(1)).unwrap();
        assert_eq!(s.finetune_validation.len(), 1);
        assert_eq!(s.finetune_train.len(), 9);
        assert_eq!(s.test.len(), 10);
    }

    #[test]
    fn allocate_counts_distributes_in_order() {
        assert_eq!(allocate_counts(11, &[0.8, 0.1, 0.1]), vec![9, 1, 1]);
        assert_eq!(allocate_counts(10, &[0.9, 0.1]), vec![9, 1]);
        assert_eq!(allocate_counts(7, &[0.5, 0.5]), vec![4, 3]);
    }

    #[test]
    fn unlabeled_docs_only_pretrain() {
        let mut docs = corpus(50);
        docs.extend((0..20).map(|i| doc(&format!("u{i}"), vec![])));
        let s = split_corpus(&docs, &SplitSpec::with_seed(3)).unwrap();
        for split in [&s.finetune_train, &s.finetune_validation, &s.test] {
            assert!(split.iter().all(|d| d.is_labeled()));
        }
        assert_eq!(s.pretrain.iter().filter(|d| !d.is_labeled()).count(), 20);
        let total =
            s.pretrain.len() + s.finetune_train.len() + s.finetune_validation.len() + s.test.len();
        assert_eq!(total, 70);
    }

    #[test]
    fn too_few_documents() {
        assert!(split_corpus(&corpus(9), &SplitSpec::default()).is_err());
    }

    #[test]
    fn bad_split_spec() {
        let spec = SplitSpec {
            pretrain_fraction: 0.7,
            ..SplitSpec::default()
        };
        assert!(matches!(
            split_corpus(&corpus(100), &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nested_subset_examples() {
        let docs = corpus(1000);
        let subsets = nested_subsets(&docs, &[0.004, 0.1, 1.0], 11).unwrap();
        let sizes: Vec<usize> = subsets.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 100, 1000]);
        for w in subsets.windows(2) {
            let big: BTreeSet<&str> = w[1].iter().map(|d| d.id.as_str()).collect();
            assert!(w[0].iter().all(|d| big.contains(d.id.as_str())));
        }
        let full = nested_subsets(&docs, &[1.0], 11).unwrap();
        assert_eq!(full[0].len(), 1000);
        assert!(nested_subsets(&docs, &[0.5, 0.5], 11).is_err());
        assert!(nested_subsets(&docs, &[], 11).is_err());
    }

    #[test]
    fn manifests_roundtrip() {
        let docs = corpus(40);
        let s = split_corpus(&docs, &SplitSpec::with_seed(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.write_manifests(dir.path()).unwrap();
        assert_eq!(DatasetSplits::from_manifests(&docs, dir.path()).unwrap(), s);
    }

    #[test]
    fn load_corpus_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"one\",\"categories\":[5,73]}\n\n{\"id\":\"b\",\"text\":\"two\",\"categories\":[]}\n{\"id\":\"c\",\"text\":\"\",\"categories\":[1]}\n",
        )
        .unwrap();
        match load_corpus(&path, &LabelScheme::osti()) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_corpus(&dir.path().join("missing"), &LabelScheme::osti()),
            Err(Error::Io { .. })
        ));
    }
}
