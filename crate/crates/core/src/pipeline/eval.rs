use crate::error::{EalmError, Result};
use crate::fusion::Ealm;
use crate::pretrained_lm::PretrainedLM;
use crate::textdata::{tokenize, LabeledUtterance, Utterance, Vocabulary};

/// Anything that scores tokens under teacher forcing.
pub trait LanguageModel {
    /// NLL of `tokens[1..]`, one value per predicted token.
    fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>>;
    fn vocab_hash(&self) -> &str;
    /// Content hash identifying every checkpoint behind the model.
    fn checkpoint_hash(&self) -> String;
    fn kind(&self) -> &'static str;
}

impl LanguageModel for PretrainedLM {
    fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        PretrainedLM::token_nlls(self, tokens)
    }

    fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    fn checkpoint_hash(&self) -> String {
        self.to_checkpoint().content_hash()
    }

    fn kind(&self) -> &'static str {
        "pretrained"
    }
}

impl LanguageModel for Ealm {
    fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ealm::token_nlls(self, tokens)
    }

    fn vocab_hash(&self) -> &str {
        &self.pretrained.vocab_hash
    }

    /// The fusion checkpoint records the hashes of every component.
    fn checkpoint_hash(&self) -> String {
        self.fusion.to_checkpoint().content_hash()
    }

    fn kind(&self) -> &'static str {
        "ealm"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub name: String,
    pub vocab_hash: String,
    pub utterances: Vec<Utterance>,
}

impl TestSet {
    pub fn new(name: impl Into<String>, vocab: &Vocabulary, corpus: &[LabeledUtterance], max_len: usize) -> Self {
        TestSet {
            name: name.into(),
            vocab_hash: vocab.content_hash(),
            utterances: corpus.iter().map(|u| tokenize(vocab, u, max_len).0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceReport {
    pub entity_type: String,
    pub utterances: usize,
    pub tokens: usize,
    pub total_nll: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub set: String,
    pub model: String,
    pub checkpoint_hash: String,
    pub utterances: usize,
    pub tokens: usize,
    pub total_nll: f64,
    pub perplexity: f64,
    /// Utterances containing at least one entity of a type; types with no
    /// such utterance are absent.
    pub slices: Vec<SliceReport>,
    /// Per utterance, per predicted token.
    pub nlls: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn slice(&self, entity_type: &str) -> Option<&SliceReport> {
        self.slices.iter().find(|s| s.entity_type == entity_type)
    }
}

/// `(base − new) / base` on perplexities.
pub fn relative_reduction(base: f64, new: f64) -> f64 {
    (base - new) / base
}

pub fn evaluate_perplexity(model: &dyn LanguageModel, name: &str, test: &TestSet) -> Result<EvalReport> {
    if test.vocab_hash != model.vocab_hash() {
        return Err(EalmError::contract(format!(
            "test set {} was tokenized with a different vocabulary",
            test.name
        )));
    }
    let nlls = test
        .utterances
        .iter()
        .map(|u| model.token_nlls(&u.ids))
        .collect::<Result<Vec<_>>>()?;
    let tokens: usize = nlls.iter().map(|v| v.len()).sum();
    if tokens == 0 {
        return Err(EalmError::EmptyBatch(format!("test set {} has no predicted tokens", test.name)));
    }
    let total_nll: f64 = nlls.iter().flatten().sum();
    let mut types: Vec<&str> = test
        .utterances
        .iter()
        .flat_map(|u| u.spans.iter().map(|s| s.entity_type.as_str()))
        .collect();
    types.sort();
    types.dedup();
    let slices = types
        .into_iter()
        .filter_map(|ty| {
            let idx: Vec<usize> = (0..test.utterances.len())
                .filter(|&i| test.utterances[i].has_type(ty))
                .collect();
            let tokens: usize = idx.iter().map(|&i| nlls[i].len()).sum();
            (tokens > 0).then(|| {
                let total: f64 = idx.iter().flat_map(|&i| nlls[i].iter()).sum();
                SliceReport {
                    entity_type: ty.to_string(),
                    utterances: idx.len(),
                    tokens,
                    total_nll: total,
                    perplexity: (total / tokens as f64).exp(),
                }
            })
        })
        .collect();
    Ok(EvalReport {
        set: test.name.clone(),
        model: name.to_string(),
        checkpoint_hash: model.checkpoint_hash(),
        utterances: test.utterances.len(),
        tokens,
        total_nll,
        perplexity: (total_nll / tokens as f64).exp(),
        slices,
        nlls,
    })
}

/// Report table: one overall row plus one row per entity-type slice.
/// `baseline`, when given, must hold reports for the same sets.
pub fn reports_tsv(reports: &[EvalReport], baseline: Option<&[EvalReport]>, seed: u64) -> Result<String> {
    let mut s = String::from(
        "set\tmodel\tslice\tutterances\ttokens\ttotal_nll\tperplexity\tbaseline_perplexity\trelative_reduction\tseed\tcheckpoint_sha256\n",
    );
    for r in reports {
        let base = match baseline {
            Some(b) => Some(
                b.iter()
                    .find(|x| x.set == r.set)
                    .ok_or_else(|| EalmError::usage(format!("no baseline report for {}", r.set)))?,
            ),
            None => None,
        };
        let mut row = |slice: &str, utts: usize, tokens: usize, nll: f64, ppl: f64, base_ppl: Option<f64>| {
            let (bp, red) = match base_ppl {
                Some(b) => (format!("{b:?}"), format!("{:?}", relative_reduction(b, ppl))),
                None => ("".into(), "".into()),
            };
            s.push_str(&format!(
                "{}\t{}\t{slice}\t{utts}\t{tokens}\t{nll:?}\t{ppl:?}\t{bp}\t{red}\t{seed}\t{}\n",
                r.set, r.model, r.checkpoint_hash
            ));
        };
        row("all", r.utterances, r.tokens, r.total_nll, r.perplexity, base.map(|b| b.perplexity));
        for sl in &r.slices {
            let bp = base.and_then(|b| b.slice(&sl.entity_type)).map(|b| b.perplexity);
            row(&sl.entity_type, sl.utterances, sl.tokens, sl.total_nll, sl.perplexity, bp);
        }
    }
    Ok(s)
}

/// Raw NLL sidecar: `utterance<TAB>position<TAB>nll` at full precision.
pub fn nll_sidecar(report: &EvalReport) -> String {
    let mut s = String::from("utterance\tposition\tnll\n");
    for (i, v) in report.nlls.iter().enumerate() {
        for (j, x) in v.iter().enumerate() {
            s.push_str(&format!("{i}\t{}\t{x:?}\n", j + 1));
        }
    }
    s
}
