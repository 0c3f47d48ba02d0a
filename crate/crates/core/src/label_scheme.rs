//! Link tags and their grammar.
//!
//! Every shot carries a tag describing how it links to the next shot: `B->I`
//! (scene start, continues), `I->I` (inside, continues), `I->E` (inside, next
//! shot closes the scene), `B->E` (start of a two-shot scene) and `N` (no
//! link: the scene ends here). In SSC mode each tag is additionally tied to
//! a scene category, so `C` categories give `5·C` tags.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinkKind {
    BtoI,
    ItoI,
    ItoE,
    BtoE,
    N,
}

impl LinkKind {
    pub const ALL: [LinkKind; 5] = [
        LinkKind::BtoI,
        LinkKind::ItoI,
        LinkKind::ItoE,
        LinkKind::BtoE,
        LinkKind::N,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LinkKind::BtoI => "B-I",
            LinkKind::ItoI => "I-I",
            LinkKind::ItoE => "I-E",
            LinkKind::BtoE => "B-E",
            LinkKind::N => "N",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Kinds allowed to follow `self` within the same category (or, after
    /// `N`, in any category).
    fn successors(self) -> &'static [LinkKind] {
        match self {
            LinkKind::BtoI | LinkKind::ItoI => &[LinkKind::ItoI, LinkKind::ItoE],
            LinkKind::ItoE | LinkKind::BtoE => &[LinkKind::N],
            LinkKind::N => &[LinkKind::BtoI, LinkKind::BtoE, LinkKind::N],
        }
    }

    pub fn can_start(self) -> bool {
        matches!(self, LinkKind::BtoI | LinkKind::BtoE | LinkKind::N)
    }

    pub fn can_end(self) -> bool {
        self == LinkKind::N
    }

    /// Fewest shots that must follow a shot with this kind.
    fn min_remaining(self) -> usize {
        match self {
            LinkKind::BtoI | LinkKind::ItoI => 2,
            LinkKind::ItoE | LinkKind::BtoE => 1,
            LinkKind::N => 0,
        }
    }
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dense index into the scheme's category list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CategoryId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkTag {
    pub kind: LinkKind,
    pub category: Option<CategoryId>,
}

impl LinkTag {
    pub fn new(kind: LinkKind, category: Option<CategoryId>) -> Self {
        LinkTag { kind, category }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SchemeMode {
    /// Segmentation only: five tags.
    Ss,
    /// Segmentation and classification: five tags per category.
    Ssc,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    mode: SchemeMode,
    categories: Vec<String>,
}

impl LabelScheme {
    pub fn ss() -> Self {
        LabelScheme {
            mode: SchemeMode::Ss,
            categories: Vec::new(),
        }
    }

    pub fn ssc<S: AsRef<str>>(categories: &[S]) -> Result<Self> {
        let categories: Vec<String> = categories.iter().map(|c| c.as_ref().to_string()).collect();
        if categories.is_empty() {
            return Err(Error::Config("SSC scheme needs at least one category".into()));
        }
        for (i, c) in categories.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Config("empty category name".into()));
            }
            if categories[..i].contains(c) {
                return Err(Error::Config(format!("duplicate category {c:?}")));
            }
        }
        Ok(LabelScheme {
            mode: SchemeMode::Ssc,
            categories,
        })
    }

    /// Re-checks invariants after deserialization.
    pub fn validated(self) -> Result<Self> {
        match self.mode {
            SchemeMode::Ss if !self.categories.is_empty() => {
                Err(Error::Config("SS scheme must not list categories".into()))
            }
            SchemeMode::Ss => Ok(self),
            SchemeMode::Ssc => LabelScheme::ssc(&self.categories),
        }
    }

    pub fn mode(&self) -> SchemeMode {
        self.mode
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn num_tags(&self) -> usize {
        5 * self.categories.len().max(1)
    }

    pub fn category_name(&self, id: CategoryId) -> Option<&str> {
        self.categories.get(id.0).map(String::as_str)
    }

    pub fn category_id(&self, name: &str) -> Result<CategoryId> {
        self.categories
            .iter()
            .position(|c| c == name)
            .map(CategoryId)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    /// Canonical tag order: category-major, kind-minor.
    pub fn tag_table(&self) -> Vec<LinkTag> {
        (0..self.num_tags()).map(|i| self.tag(i)).collect()
    }

    pub fn tag(&self, index: usize) -> LinkTag {
        assert!(index < self.num_tags(), "tag index {index} out of range");
        let kind = LinkKind::ALL[index % 5];
        let category = match self.mode {
            SchemeMode::Ss => None,
            SchemeMode::Ssc => Some(CategoryId(index / 5)),
        };
        LinkTag { kind, category }
    }

    pub fn index_of(&self, tag: LinkTag) -> Result<usize> {
        match (self.mode, tag.category) {
            (SchemeMode::Ss, None) => Ok(tag.kind.index()),
            (SchemeMode::Ssc, Some(c)) if c.0 < self.categories.len() => {
                Ok(c.0 * 5 + tag.kind.index())
            }
            (SchemeMode::Ssc, Some(c)) => Err(Error::UnknownCategory(format!("#{}", c.0))),
            (SchemeMode::Ssc, None) => Err(Error::MissingCategory(
                "SSC tags must carry a category".into(),
            )),
            (SchemeMode::Ss, Some(_)) => Err(Error::Config("SS tags carry no category".into())),
        }
    }

    /// Stable identity of the tag vocabulary, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let canonical = match self.mode {
            SchemeMode::Ss => "SS".to_string(),
            SchemeMode::Ssc => format!("SSC:{}", self.categories.join("\u{1f}")),
        };
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn describe(&self) -> String {
        match self.mode {
            SchemeMode::Ss => "SS".into(),
            SchemeMode::Ssc => format!("SSC[{}]", self.categories.join(",")),
        }
    }

    pub fn tag_to_string(&self, tag: LinkTag) -> String {
        match tag.category.and_then(|c| self.category_name(c)) {
            Some(name) => format!("{name}_{}", tag.kind),
            None => tag.kind.to_string(),
        }
    }

    pub fn parse_tag(&self, s: &str) -> Result<LinkTag> {
        let bad = || Error::Config(format!("unrecognized tag {s:?}"));
        match self.mode {
            SchemeMode::Ss => LinkKind::parse(s).map(|k| LinkTag::new(k, None)).ok_or_else(bad),
            SchemeMode::Ssc => {
                let (cat, kind) = s.rsplit_once('_').ok_or_else(bad)?;
                let kind = LinkKind::parse(kind).ok_or_else(bad)?;
                Ok(LinkTag::new(kind, Some(self.category_id(cat)?)))
            }
        }
    }

    pub fn tags_to_json(&self, tags: &[LinkTag]) -> String {
        let names: Vec<String> = tags.iter().map(|&t| self.tag_to_string(t)).collect();
        serde_json::to_string(&names).expect("string list serializes")
    }

    pub fn tags_from_json(&self, json: &str) -> Result<Vec<LinkTag>> {
        let names: Vec<String> = serde_json::from_str(json)?;
        names.iter().map(|n| self.parse_tag(n)).collect()
    }

    pub fn is_legal_transition(&self, from: LinkTag, to: LinkTag) -> bool {
        if !from.kind.successors().contains(&to.kind) {
            return false;
        }
        from.kind == LinkKind::N || from.category == to.category
    }

    pub fn transition_mask(&self) -> TransitionMask {
        let t = self.num_tags();
        let table = self.tag_table();
        let mut allowed = vec![false; t * t];
        for (i, &a) in table.iter().enumerate() {
            for (j, &b) in table.iter().enumerate() {
                allowed[i * t + j] = self.is_legal_transition(a, b);
            }
        }
        TransitionMask {
            num_tags: t,
            allowed,
            legal_start: table.iter().map(|x| x.kind.can_start()).collect(),
            legal_end: table.iter().map(|x| x.kind.can_end()).collect(),
        }
    }

    /// Tags a partition. A scene of length L becomes
    /// `[B->I, I->I × (L−3), I->E, N]`, `[B->E, N]` for L = 2, `[N]` for L = 1.
    pub fn encode(&self, scenes: &[SceneAnnotation], n_shots: usize) -> Result<Vec<LinkTag>> {
        check_partition(scenes, n_shots).map_err(|reason| Error::InvalidPartition {
            video_id: String::new(),
            reason,
        })?;
        let mut tags = Vec::with_capacity(n_shots);
        for scene in scenes {
            let category = match (self.mode, scene.category) {
                (SchemeMode::Ss, _) => None,
                (SchemeMode::Ssc, None) => {
                    return Err(Error::MissingCategory(format!(
                        "scene [{}, {}] has no category",
                        scene.start_shot, scene.end_shot
                    )))
                }
                (SchemeMode::Ssc, Some(c)) => {
                    if c.0 >= self.categories.len() {
                        return Err(Error::UnknownCategory(format!("#{}", c.0)));
                    }
                    Some(c)
                }
            };
            let len = scene.len();
            let mut push = |k| tags.push(LinkTag::new(k, category));
            match len {
                1 => push(LinkKind::N),
                2 => {
                    push(LinkKind::BtoE);
                    push(LinkKind::N);
                }
                _ => {
                    push(LinkKind::BtoI);
                    for _ in 0..len - 3 {
                        push(LinkKind::ItoI);
                    }
                    push(LinkKind::ItoE);
                    push(LinkKind::N);
                }
            }
        }
        Ok(tags)
    }

    pub fn encode_indices(&self, scenes: &[SceneAnnotation], n_shots: usize) -> Result<Vec<usize>> {
        self.encode(scenes, n_shots)?
            .into_iter()
            .map(|t| self.index_of(t))
            .collect()
    }

    /// First grammar violation in `tags`, if any.
    pub fn check_grammar(&self, tags: &[LinkTag]) -> Result<()> {
        let Some(first) = tags.first() else {
            return Ok(());
        };
        if !first.kind.can_start() {
            return Err(Error::Ungrammatical {
                position: 0,
                reason: format!("sequence cannot start with {}", self.tag_to_string(*first)),
            });
        }
        for (i, w) in tags.windows(2).enumerate() {
            if !self.is_legal_transition(w[0], w[1]) {
                return Err(Error::Ungrammatical {
                    position: i + 1,
                    reason: format!(
                        "{} cannot follow {}",
                        self.tag_to_string(w[1]),
                        self.tag_to_string(w[0])
                    ),
                });
            }
        }
        let last = tags[tags.len() - 1];
        if !last.kind.can_end() {
            return Err(Error::Ungrammatical {
                position: tags.len() - 1,
                reason: format!("sequence cannot end with {}", self.tag_to_string(last)),
            });
        }
        Ok(())
    }

    /// Splits a grammatical tag sequence after every `N`.
    pub fn decode(&self, tags: &[LinkTag]) -> Result<Vec<SceneAnnotation>> {
        self.check_grammar(tags)?;
        let mut scenes = Vec::new();
        let mut start = 0;
        for (i, tag) in tags.iter().enumerate() {
            if tag.kind != LinkKind::N {
                continue;
            }
            let category = tags[start].category;
            if let Some(other) = tags[start..=i].iter().find(|t| t.category != category) {
                let name = |c: Option<CategoryId>| {
                    c.and_then(|c| self.category_name(c))
                        .unwrap_or("-")
                        .to_string()
                };
                return Err(Error::MixedCategories {
                    scene: scenes.len(),
                    first: name(category),
                    second: name(other.category),
                });
            }
            scenes.push(SceneAnnotation {
                start_shot: start,
                end_shot: i,
                category,
            });
            start = i + 1;
        }
        Ok(scenes)
    }

    pub fn decode_indices(&self, tags: &[usize]) -> Result<Vec<SceneAnnotation>> {
        let tags: Vec<LinkTag> = tags.iter().map(|&i| self.tag(i)).collect();
        self.decode(&tags)
    }

    /// Greedy left-to-right repair into a grammatical sequence.
    ///
    /// The last kind is forced to `N`. Each position keeps its tag when it is
    /// legal after the (already repaired) previous tag, legal before the next
    /// input tag, and leaves enough shots to close its scene. Otherwise the
    /// kind is rewritten using the preference order `I->I, I->E, B->I, B->E,
    /// N`, keeping the tag's own category when possible.
    pub fn repair(&self, tags: &[LinkTag]) -> Vec<LinkTag> {
        let n = tags.len();
        let mut input = tags.to_vec();
        if let Some(last) = input.last_mut() {
            last.kind = LinkKind::N;
        }
        const PREFERENCE: [LinkKind; 5] = [
            LinkKind::ItoI,
            LinkKind::ItoE,
            LinkKind::BtoI,
            LinkKind::BtoE,
            LinkKind::N,
        ];
        let mut out: Vec<LinkTag> = Vec::with_capacity(n);
        for i in 0..n {
            let remaining = n - 1 - i;
            let prev = out.last().copied();
            let next = input.get(i + 1).copied();
            let after_prev = |t: LinkTag| match prev {
                None => t.kind.can_start(),
                Some(p) => self.is_legal_transition(p, t),
            };
            let before_next = |t: LinkTag| match next {
                None => t.kind.can_end(),
                Some(x) => self.is_legal_transition(t, x),
            };
            let closable = |t: LinkTag| t.kind.min_remaining() <= remaining;

            let cur = input[i];
            if after_prev(cur) && before_next(cur) && closable(cur) {
                out.push(cur);
                continue;
            }
            let mut categories = vec![cur.category];
            if let Some(p) = prev {
                if !categories.contains(&p.category) {
                    categories.push(p.category);
                }
            }
            let candidates: Vec<LinkTag> = categories
                .iter()
                .flat_map(|&c| PREFERENCE.iter().map(move |&k| LinkTag::new(k, c)))
                .filter(|&t| after_prev(t) && closable(t))
                .collect();
            let chosen = candidates
                .iter()
                .copied()
                .find(|&t| before_next(t))
                .or_else(|| candidates.first().copied())
                .expect("a closable successor always exists");
            out.push(chosen);
        }
        out
    }
}

/// Hard transition grammar materialized for the CRF.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionMask {
    pub num_tags: usize,
    /// Row-major `num_tags × num_tags`, `allowed[from * T + to]`.
    pub allowed: Vec<bool>,
    pub legal_start: Vec<bool>,
    pub legal_end: Vec<bool>,
}

impl TransitionMask {
    #[inline]
    pub fn allowed(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.num_tags + to]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// A contiguous, inclusive shot span with an optional category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneAnnotation {
    pub start_shot: usize,
    pub end_shot: usize,
    pub category: Option<CategoryId>,
}

impl SceneAnnotation {
    pub fn new(start_shot: usize, end_shot: usize, category: Option<CategoryId>) -> Self {
        SceneAnnotation {
            start_shot,
            end_shot,
            category,
        }
    }

    pub fn len(&self) -> usize {
        self.end_shot + 1 - self.start_shot
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Checks that `scenes` cover `[0, n_shots)` exclusively and contiguously.
pub fn check_partition(scenes: &[SceneAnnotation], n_shots: usize) -> Result<(), String> {
    if n_shots == 0 {
        return if scenes.is_empty() {
            Ok(())
        } else {
            Err("scenes given for a video without shots".into())
        };
    }
    let mut expected = 0usize;
    for (i, s) in scenes.iter().enumerate() {
        if s.start_shot > s.end_shot {
            return Err(format!(
                "scene {i} has start {} after end {}",
                s.start_shot, s.end_shot
            ));
        }
        if s.start_shot < expected {
            return Err(format!(
                "overlap: shot {} assigned twice (scene {i})",
                s.start_shot
            ));
        }
        if s.start_shot > expected {
            return Err(format!("gap at shot {expected}"));
        }
        if s.end_shot >= n_shots {
            return Err(format!(
                "scene {i} ends at shot {} but the video has {n_shots} shots",
                s.end_shot
            ));
        }
        expected = s.end_shot + 1;
    }
    if expected != n_shots {
        return Err(format!("gap at shot {expected}"));
    }
    Ok(())
}
