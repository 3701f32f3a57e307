use std::collections::{BTreeSet, HashMap};

use super::{parse_entity_id, Entity, EntityId, Mention};
use crate::encoder::split_words;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkerConfig {
    /// Candidates kept per mention, highest prior first.
    pub k_candidates: usize,
    /// Weight of the context-overlap term in the ranking score.
    pub lambda_ctx: f64,
    /// Context words taken on each side of a mention.
    pub window: usize,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        Self {
            k_candidates: 8,
            lambda_ctx: 1.0,
            window: 10,
        }
    }
}

/// Entity catalog with a case-folded gazetteer over names and aliases.
#[derive(Clone, Debug)]
pub struct Catalog {
    entities: Vec<Entity>,
    by_id: HashMap<EntityId, usize>,
    gazetteer: HashMap<Vec<String>, Vec<usize>>,
    longest: usize,
    descriptions: Vec<BTreeSet<String>>,
}

impl Catalog {
    pub fn new(entities: Vec<Entity>) -> Result<Self> {
        let mut by_id = HashMap::new();
        let mut gazetteer: HashMap<Vec<String>, Vec<usize>> = HashMap::new();
        let mut longest = 0;
        for (i, e) in entities.iter().enumerate() {
            if !(0.0..=1.0).contains(&e.prior) {
                return Err(Error::Invalid(format!("entity {} prior {} outside [0, 1]", e.id, e.prior)));
            }
            if by_id.insert(e.id, i).is_some() {
                return Err(Error::Invalid(format!("duplicate entity id {}", e.id)));
            }
            let forms: BTreeSet<Vec<String>> = std::iter::once(&e.name)
                .chain(&e.aliases)
                .map(|s| split_words(s).into_iter().map(|w| w.text).collect::<Vec<_>>())
                .filter(|k| !k.is_empty())
                .collect();
            for key in forms {
                longest = longest.max(key.len());
                gazetteer.entry(key).or_default().push(i);
            }
        }
        let descriptions = entities
            .iter()
            .map(|e| e.description.iter().flat_map(|d| split_words(d)).map(|w| w.text).collect())
            .collect();
        Ok(Self {
            entities,
            by_id,
            gazetteer,
            longest,
            descriptions,
        })
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn get(&self, id: EntityId) -> Option<&Entity> {
        self.by_id.get(&id).map(|&i| &self.entities[i])
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Parses `id<TAB>name<TAB>alias1|alias2<TAB>prior<TAB>description` rows.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entities = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected 5 tab-separated columns".into(),
                });
            }
            let prior: f64 = cols[3].trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad prior `{}`", cols[3]),
            })?;
            entities.push(Entity {
                id: parse_entity_id(cols[0], i + 1)?,
                name: cols[1].to_string(),
                aliases: cols[2].split('|').filter(|a| !a.is_empty()).map(str::to_string).collect(),
                prior,
                description: cols[4].split_whitespace().map(str::to_string).collect(),
            });
        }
        Self::new(entities)
    }

    pub fn to_tsv(&self) -> String {
        self.entities
            .iter()
            .map(|e| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    e.id,
                    e.name,
                    e.aliases.join("|"),
                    e.prior,
                    e.description.join(" ")
                )
            })
            .collect()
    }
}

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.iter().filter(|w| b.contains(**w)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Longest-match gazetteer scan, then per-mention disambiguation by
/// `prior + lambda_ctx * Jaccard(context window, description)`.
/// Ties go to the smaller entity id.
pub fn link_entities(document: &str, catalog: &Catalog, cfg: &LinkerConfig) -> Vec<(Mention, EntityId)> {
    let words = split_words(document);
    let texts: Vec<String> = words.iter().map(|w| w.text.clone()).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let max_len = catalog.longest.min(words.len() - i);
        let hit = (1..=max_len)
            .rev()
            .find_map(|len| catalog.gazetteer.get(&texts[i..i + len]).map(|c| (len, c)));
        let Some((len, candidates)) = hit else {
            i += 1;
            continue;
        };

        let mut ranked: Vec<usize> = candidates.clone();
        ranked.sort_by(|&a, &b| {
            let (ea, eb) = (&catalog.entities[a], &catalog.entities[b]);
            eb.prior.total_cmp(&ea.prior).then(ea.id.cmp(&eb.id))
        });
        ranked.truncate(cfg.k_candidates.max(1));

        let lo = i.saturating_sub(cfg.window);
        let hi = (i + len + cfg.window).min(words.len());
        let context: BTreeSet<&str> = texts[lo..i]
            .iter()
            .chain(&texts[i + len..hi])
            .map(String::as_str)
            .collect();

        let mut best: Option<(f64, EntityId)> = None;
        for c in ranked {
            let e = &catalog.entities[c];
            let score = e.prior + cfg.lambda_ctx * jaccard(&context, &catalog.descriptions[c]);
            let better = match best {
                None => true,
                Some((s, id)) => score > s || (score == s && e.id < id),
            };
            if better {
                best = Some((score, e.id));
            }
        }
        let (_, chosen) = best.expect("gazetteer entries are never empty");
        let (start, end) = (words[i].start, words[i + len - 1].end);
        out.push((
            Mention {
                surface: document.chars().skip(start).take(end - start).collect(),
                span: start..end,
                tokens: i..i + len,
            },
            chosen,
        ));
        i += len;
    }
    out
}
