//! Prompt templates, mask-supervised fine-tuning examples, and masked NLL.
//!
//! A fine-tuning example concatenates the rendered prompt, the target text, and
//! `eos`. Loss falls only on target positions (eos included): `loss_mask[i]` is
//! false for `i < prompt_len` and true from `prompt_len` on. The loss at a
//! supervised position `i` reads the model's prediction from position `i - 1`,
//! so logit rows that only predict prompt tokens never contribute.
//!
//! Example file layout (little-endian): magic `BFSF`, version u16, example
//! count u64, then per example `len` u32, `prompt_len` u32, and `len` u32 ids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, ParallelPair};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenize::Tokenizer;

pub const SFT_MAGIC: &[u8; 4] = b"BFSF";
pub const SFT_VERSION: u16 = 1;

/// A prompt recipe: `template` must contain exactly one `{source}` placeholder;
/// `response_header` is the trailing text after which the target begins (it
/// belongs to the prompt and is masked).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemplateWire", into = "TemplateWire")]
pub struct PromptTemplate {
    direction: Direction,
    template: String,
    response_header: String,
}

#[derive(Serialize, Deserialize)]
struct TemplateWire {
    direction: Direction,
    template: String,
    response_header: String,
}

impl TryFrom<TemplateWire> for PromptTemplate {
    type Error = Error;
    fn try_from(w: TemplateWire) -> Result<Self> {
        PromptTemplate::new(w.direction, w.template, w.response_header)
    }
}

impl From<PromptTemplate> for TemplateWire {
    fn from(t: PromptTemplate) -> TemplateWire {
        TemplateWire {
            direction: t.direction,
            template: t.template,
            response_header: t.response_header,
        }
    }
}

impl PromptTemplate {
    pub fn new(
        direction: Direction,
        template: impl Into<String>,
        response_header: impl Into<String>,
    ) -> Result<Self> {
        let template = template.into();
        let count = template.matches("{source}").count();
        if count != 1 {
            return Err(Error::Invalid {
                what: "prompt template",
                msg: format!("expected exactly one {{source}} placeholder, found {count}"),
            });
        }
        Ok(PromptTemplate {
            direction,
            template,
            response_header: response_header.into(),
        })
    }

    /// Stock English-to-Japanese instruction prompt.
    pub fn en_to_ja() -> Self {
        PromptTemplate::new(
            Direction::from_codes("en", "ja").expect("static codes"),
            "Translate this from English to Japanese:\nEnglish: {source}\n",
            "Japanese: ",
        )
        .expect("stock template is valid")
    }

    /// Stock Japanese-to-English instruction prompt, written in Japanese.
    pub fn ja_to_en() -> Self {
        PromptTemplate::new(
            Direction::from_codes("ja", "en").expect("static codes"),
            "これを日本語から英語に翻訳してください :\n日本語 : {source}\n",
            "英語 : ",
        )
        .expect("stock template is valid")
    }

    /// Compact `"{source} = "` prompt for synthetic tasks and tests.
    pub fn minimal(direction: Direction) -> Self {
        PromptTemplate::new(direction, "{source}", " = ").expect("static template is valid")
    }

    /// Loads a template from a JSON file with keys `direction` (object with
    /// `source`/`target`), `template`, and `response_header`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::io(path))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::file(path, format!("bad template file: {e}")))
    }

    pub fn direction(&self) -> &Direction {
        &self.direction
    }
}

/// The prompt for `source_text`: the template with its placeholder substituted,
/// ending with the response header.
pub fn render_prompt(template: &PromptTemplate, source_text: &str) -> String {
    let mut s = template.template.replace("{source}", source_text);
    s.push_str(&template.response_header);
    s
}

/// Concatenates rendered (prompt + target + newline) blocks for each example,
/// then the rendered prompt for the query. With no examples this is exactly the
/// query prompt. All pairs must match the template's direction.
pub fn few_shot_prompt(
    examples: &[ParallelPair],
    query: &ParallelPair,
    template: &PromptTemplate,
) -> Result<String> {
    let mut out = String::new();
    for ex in examples.iter().chain(std::iter::once(query)) {
        if ex.direction != template.direction {
            return Err(Error::Pair {
                id: ex.id,
                msg: format!(
                    "direction {} does not match template direction {}",
                    ex.direction, template.direction
                ),
            });
        }
    }
    for ex in examples {
        out.push_str(&render_prompt(template, &ex.source_text));
        out.push_str(&ex.target_text);
        out.push('\n');
    }
    out.push_str(&render_prompt(template, &query.source_text));
    Ok(out)
}

/// One tokenized fine-tuning example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    /// Prompt ids, then target ids, then eos.
    pub input_ids: Vec<u32>,
    /// False on prompt positions, true from `prompt_len` on.
    pub loss_mask: Vec<bool>,
    pub prompt_len: usize,
}

impl SftExample {
    /// Number of supervised positions (target tokens plus eos).
    pub fn supervised_len(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Tokenizes `pair` under `template` into a masked example.
pub fn build_sft_example(
    pair: &ParallelPair,
    template: &PromptTemplate,
    tokenizer: &dyn Tokenizer,
) -> Result<SftExample> {
    if pair.direction != template.direction {
        return Err(Error::Pair {
            id: pair.id,
            msg: format!(
                "direction {} does not match template direction {}",
                pair.direction, template.direction
            ),
        });
    }
    let wrap = |msg: String| Error::Pair { id: pair.id, msg };
    let prompt = render_prompt(template, &pair.source_text);
    let prompt_ids = tokenizer.encode(&prompt).map_err(|e| wrap(e.to_string()))?;
    let target_ids = tokenizer
        .encode(&pair.target_text)
        .map_err(|e| wrap(e.to_string()))?;
    if prompt_ids.is_empty() {
        return Err(wrap("prompt tokenized to nothing".into()));
    }
    if target_ids.is_empty() {
        return Err(wrap("target tokenized to nothing".into()));
    }
    let prompt_len = prompt_ids.len();
    let mut input_ids = prompt_ids;
    input_ids.extend_from_slice(&target_ids);
    input_ids.push(tokenizer.eos_id());
    let mut loss_mask = vec![false; prompt_len];
    loss_mask.resize(input_ids.len(), true);
    Ok(SftExample {
        input_ids,
        loss_mask,
        prompt_len,
    })
}

/// Summed negative log-likelihood of the supervised positions.
///
/// `logits[i]` are the model's next-token scores after reading position `i`, so
/// a supervised position `i >= 1` contributes `-log softmax(logits[i-1])[ids[i]]`.
/// Position 0 has no predictor and is skipped even when its mask is true.
pub fn masked_nll<F: Scalar>(logits: &[Vec<F>], example: &SftExample) -> Result<F> {
    let len = example.input_ids.len();
    if logits.len() != len {
        return Err(Error::Shape(format!(
            "{} logit rows for {len} positions",
            logits.len()
        )));
    }
    if example.loss_mask.len() != len {
        return Err(Error::Shape(format!(
            "mask length {} for {len} positions",
            example.loss_mask.len()
        )));
    }
    let vocab = match logits.first() {
        Some(row) => row.len(),
        None => return Err(Error::Shape("no positions".into())),
    };
    let mut total = F::zero();
    for i in 1..len {
        if !example.loss_mask[i] {
            continue;
        }
        let row = &logits[i - 1];
        if row.len() != vocab {
            return Err(Error::Shape(format!(
                "logit row {} has width {}, row 0 has {vocab}",
                i - 1,
                row.len()
            )));
        }
        let id = example.input_ids[i] as usize;
        if id >= vocab {
            return Err(Error::Shape(format!(
                "token id {id} outside vocabulary of {vocab}"
            )));
        }
        // log-sum-exp with max subtraction.
        let mut max = F::neg_infinity();
        for &x in row {
            if x > max {
                max = x;
            }
        }
        let mut sum = F::zero();
        for &x in row {
            sum += (x - max).exp();
        }
        total += max + sum.ln() - row[id];
    }
    Ok(total)
}

fn read_exact_buf<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(Error::io(path))?;
    Ok(buf)
}

/// Writes examples in the fine-tuning binary format.
pub fn save_sft(examples: &[SftExample], path: &Path) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        let ok = ex.prompt_len >= 1
            && ex.prompt_len < ex.input_ids.len()
            && ex.loss_mask.len() == ex.input_ids.len();
        if !ok {
            return Err(Error::Shape(format!(
                "example {i}: prompt_len {} of {} ids",
                ex.prompt_len,
                ex.input_ids.len()
            )));
        }
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(SFT_MAGIC).map_err(Error::io(path))?;
    w.write_all(&SFT_VERSION.to_le_bytes()).map_err(Error::io(path))?;
    w.write_all(&(examples.len() as u64).to_le_bytes())
        .map_err(Error::io(path))?;
    for ex in examples {
        w.write_all(&(ex.input_ids.len() as u32).to_le_bytes())
            .map_err(Error::io(path))?;
        w.write_all(&(ex.prompt_len as u32).to_le_bytes())
            .map_err(Error::io(path))?;
        for &id in &ex.input_ids {
            w.write_all(&id.to_le_bytes()).map_err(Error::io(path))?;
        }
    }
    w.flush().map_err(Error::io(path))
}

/// Reads a file written by [`save_sft`], rebuilding masks from prompt lengths.
pub fn load_sft(path: &Path) -> Result<Vec<SftExample>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);
    let magic = read_exact_buf::<4>(&mut r, path)?;
    if &magic != SFT_MAGIC {
        return Err(Error::file(path, format!("bad magic {magic:?}, want BFSF")));
    }
    let version = u16::from_le_bytes(read_exact_buf::<2>(&mut r, path)?);
    if version != SFT_VERSION {
        return Err(Error::file(
            path,
            format!("unsupported version {version}, want {SFT_VERSION}"),
        ));
    }
    let count = u64::from_le_bytes(read_exact_buf::<8>(&mut r, path)?);
    let mut examples = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = u32::from_le_bytes(read_exact_buf::<4>(&mut r, path)?) as usize;
        let prompt_len = u32::from_le_bytes(read_exact_buf::<4>(&mut r, path)?) as usize;
        if prompt_len == 0 || prompt_len >= len {
            return Err(Error::file(
                path,
                format!("example {i}: prompt_len {prompt_len} of {len} ids"),
            ));
        }
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw).map_err(Error::io(path))?;
        let input_ids: Vec<u32> = raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut loss_mask = vec![false; prompt_len];
        loss_mask.resize(len, true);
        examples.push(SftExample {
            input_ids,
            loss_mask,
            prompt_len,
        });
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest).map_err(Error::io(path))? {
        0 => Ok(examples),
        _ => Err(Error::file(path, "trailing data after declared examples")),
    }
}
