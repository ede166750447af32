//! Template vocabulary for the synthetic corpus. Each slot word carries the
//! gold annotation it contributes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityWord {
    pub surface: String,
    pub etype: String,
    pub category: String,
    /// Emerging entities are unknown to the legacy lexicon and gazetteer.
    #[serde(default)]
    pub emerging: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NounWord {
    pub surface: String,
    pub category: String,
    /// Other categories the same surface can mean. The gold category of an
    /// ambiguous noun is drawn per query and only the user's history hints
    /// at it. The legacy map knows `category` alone.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alt_categories: Vec<String>,
}

impl NounWord {
    pub fn senses(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.category).chain(&self.alt_categories)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffixWord {
    pub surface: String,
    pub intent: String,
}

/// Slot vocabulary and sampling probabilities for `generate_corpus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusProfile {
    pub entities: Vec<EntityWord>,
    pub nouns: Vec<NounWord>,
    pub modifiers: Vec<String>,
    pub suffixes: Vec<SuffixWord>,
    pub stopword: String,
    pub default_intent: String,
    pub note_suffixes: Vec<String>,
    pub p_modifier: f64,
    /// Probability of a stopword after a modifier.
    pub p_stopword: f64,
    /// Probabilities of 0, 1 and 2 entity slots.
    pub p_entities: [f64; 3],
    pub p_suffix: f64,
    /// Probability that an entity is drawn from the noun's own category.
    pub p_same_category: f64,
    /// Probability that a history query stays in the user's current domain.
    pub p_hist_domain: f64,
    pub max_hist: usize,
    pub max_notes: usize,
}

const ENTITIES: &[(&str, &str, &str, bool)] = &[
    ("兰蔻", "BRAND", "Beauty", false),
    ("迪奥", "BRAND", "Beauty", false),
    ("雅诗兰黛", "BRAND", "Beauty", false),
    ("香奈儿", "BRAND", "Beauty", false),
    ("ysl", "BRAND", "Beauty", false),
    ("花西子", "BRAND", "Beauty", true),
    ("完美日记", "BRAND", "Beauty", false),
    ("小黑瓶", "PRODUCT_SERIES", "Beauty", false),
    ("小棕瓶", "PRODUCT_SERIES", "Beauty", true),
    ("耐克", "BRAND", "Fashion", false),
    ("阿迪达斯", "BRAND", "Fashion", false),
    ("优衣库", "BRAND", "Fashion", false),
    ("李宁", "BRAND", "Fashion", false),
    ("安踏", "BRAND", "Fashion", true),
    ("空军一号", "PRODUCT_SERIES", "Fashion", false),
    ("华为", "BRAND", "Digital", false),
    ("小米", "BRAND", "Digital", false),
    ("索尼", "BRAND", "Digital", false),
    ("大疆", "BRAND", "Digital", true),
    ("oppo", "BRAND", "Digital", false),
    ("mate60", "PRODUCT_SERIES", "Digital", true),
    ("海底捞", "BRAND", "Food", false),
    ("喜茶", "BRAND", "Food", false),
    ("霸王茶姬", "BRAND", "Food", true),
    ("瑞幸", "BRAND", "Food", false),
    ("李佳琦", "PERSON", "Beauty", false),
    ("周杰伦", "PERSON", "Entertainment", false),
    ("易烊千玺", "PERSON", "Entertainment", true),
    ("哈利波特", "IP", "Entertainment", false),
    ("原神", "IP", "Entertainment", false),
    ("三体", "IP", "Entertainment", true),
    ("迪士尼", "IP", "Entertainment", false),
    ("成都", "LOCATION", "Travel", false),
    ("上海", "LOCATION", "Travel", false),
    ("北京", "LOCATION", "Travel", false),
    ("三亚", "LOCATION", "Travel", false),
    ("大理", "LOCATION", "Travel", true),
    ("重庆", "LOCATION", "Travel", false),
];

const NOUNS: &[(&str, &str)] = &[
    ("口红", "Beauty"),
    ("粉底液", "Beauty"),
    ("面霜", "Beauty"),
    ("眼影", "Beauty"),
    ("香水", "Beauty"),
    ("球鞋", "Fashion"),
    ("卫衣", "Fashion"),
    ("穿搭", "Fashion"),
    ("外套", "Fashion"),
    ("手机", "Digital"),
    ("耳机", "Digital"),
    ("相机", "Digital"),
    ("平板", "Digital"),
    ("火锅", "Food"),
    ("奶茶", "Food"),
    ("烧烤", "Food"),
    ("咖啡", "Food"),
    ("酒店", "Travel"),
    ("民宿", "Travel"),
    ("景点", "Travel"),
    ("周边", "Entertainment"),
    ("手办", "Entertainment"),
    ("演唱会", "Entertainment"),
    ("电影", "Entertainment"),
];

// surface, legacy category, other sense
const AMBIGUOUS: &[(&str, &str, &str)] = &[
    ("苹果", "Digital", "Food"),
    ("皮肤", "Beauty", "Entertainment"),
    ("攻略", "Travel", "Entertainment"),
    ("礼盒", "Food", "Beauty"),
    ("配色", "Fashion", "Digital"),
];

const MODIFIERS: &[&str] = &["平价", "小众", "高级", "新款", "显白", "便宜", "好看", "学生", "夏季", "网红"];

const SUFFIXES: &[(&str, &str)] = &[
    ("推荐", "寻求推荐"),
    ("测评", "查看测评"),
    ("怎么样", "了解口碑"),
    ("教程", "学习教程"),
    ("排行", "对比排行"),
    ("价格", "询问价格"),
    ("哪里买", "寻找购买"),
];

impl Default for CorpusProfile {
    fn default() -> Self {
        Self {
            entities: ENTITIES
                .iter()
                .map(|&(s, t, c, e)| EntityWord { surface: s.into(), etype: t.into(), category: c.into(), emerging: e })
                .collect(),
            nouns: NOUNS
                .iter()
                .map(|&(s, c)| NounWord { surface: s.into(), category: c.into(), alt_categories: vec![] })
                .chain(AMBIGUOUS.iter().map(|&(s, c, alt)| NounWord {
                    surface: s.into(),
                    category: c.into(),
                    alt_categories: vec![alt.into()],
                }))
                .collect(),
            modifiers: MODIFIERS.iter().map(|s| s.to_string()).collect(),
            suffixes: SUFFIXES.iter().map(|&(s, i)| SuffixWord { surface: s.into(), intent: i.into() }).collect(),
            stopword: "的".into(),
            default_intent: "浏览内容".into(),
            note_suffixes: ["分享", "合集", "种草", "笔记"].iter().map(|s| s.to_string()).collect(),
            p_modifier: 0.4,
            p_stopword: 0.3,
            p_entities: [0.3, 0.55, 0.15],
            p_suffix: 0.6,
            p_same_category: 0.7,
            p_hist_domain: 0.85,
            max_hist: 3,
            max_notes: 2,
        }
    }
}

impl CorpusProfile {
    pub fn check(&self) -> Result<(), String> {
        if self.nouns.is_empty() {
            return Err("corpus profile needs at least one noun".into());
        }
        if self.p_entities.iter().any(|p| *p < 0.0) || self.p_entities.iter().sum::<f64>() <= 0.0 {
            return Err("p_entities must be non-negative with a positive sum".into());
        }
        for p in [self.p_modifier, self.p_stopword, self.p_suffix, self.p_same_category, self.p_hist_domain] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability {p} outside [0,1]"));
            }
        }
        Ok(())
    }

    /// All category labels the profile can produce, in first-seen order.
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self.nouns.iter().flat_map(|n| n.senses()).chain(self.entities.iter().map(|e| &e.category)) {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }
}
