//! Regenerates the bundled fixture set in `crates/core/fixtures/`.
//!
//!     cargo run -p copersona-core --example gen_fixtures
//!
//! Output is fully determined by the seed below.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use copersona_core::synthetic::{SyntheticWorld, WorldSpec};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const SEED: u64 = 20240611;
const DAY: u64 = 86_400;
const T0: u64 = 1_704_067_200; // 2024-01-01T00:00:00Z

struct Persona {
    id: &'static str,
    name: &'static str,
    description: &'static str,
    demographic: &'static str,
    share: f64,
    words: [&'static str; 20],
}

const PERSONAS: [Persona; 5] = [
    Persona {
        id: "health_aficionados",
        name: "Health Aficionados",
        description: "Structured pre-sleep wellness routines with meditation and health tracking.",
        demographic: "25-40, middle to high income",
        share: 0.213,
        words: [
            "meditation", "yoga", "stretching", "herbal", "wellness", "mindfulness", "breathing",
            "supplements", "journaling", "lavender", "hydration", "vitamins", "sleeptracker",
            "pilates", "skincare", "posture", "melatonin", "oximeter", "chamomile", "routine",
        ],
    },
    Persona {
        id: "night_owls",
        name: "Night Owls",
        description: "Late-night entertainment in bed: shows, games and music.",
        demographic: "18-35",
        share: 0.298,
        words: [
            "gaming", "movie", "series", "anime", "bingewatch", "snacks", "playlist", "console",
            "streaming", "podcast", "esports", "midnight", "livestream", "novel", "comics",
            "headphones", "karaoke", "episode", "marathon", "insomnia",
        ],
    },
    Persona {
        id: "interior_decorators",
        name: "Interior Decorators",
        description: "Bedroom styling, aesthetics and sharing makeovers.",
        demographic: "25-45, middle to high income",
        share: 0.194,
        words: [
            "decor", "aesthetic", "rattan", "linen", "vintage", "minimalist", "wallpaper",
            "ceramics", "plants", "cushions", "curtains", "moodboard", "nordic", "boho", "makeover",
            "shelf", "artwork", "palette", "texture", "renovation",
        ],
    },
    Persona {
        id: "child_care_workers",
        name: "Child-care Workers",
        description: "Night-time care giving: feeding, soothing and checking on children.",
        demographic: "25-35",
        share: 0.162,
        words: [
            "baby", "diaper", "feeding", "toddler", "nursery", "lullaby", "bottle", "swaddle",
            "teething", "stroller", "formula", "crib", "nap", "pacifier", "nightfeed", "infant",
            "babysitting", "rocking", "soothing", "storybook",
        ],
    },
    Persona {
        id: "workaholics",
        name: "Workaholics",
        description: "Long working hours continuing into the bedroom, with stress and screen time.",
        demographic: "25-40",
        share: 0.133,
        words: [
            "deadline", "overtime", "laptop", "spreadsheet", "meeting", "report", "coffee",
            "emails", "presentation", "project", "client", "startup", "budget", "slides",
            "commute", "promotion", "proposal", "analytics", "monitor", "conference",
        ],
    },
];

const SITUATION: [&str; 10] = [
    "bedside lamp", "pendant light", "chandelier", "floor lamp", "table lamp", "desk lamp",
    "night light", "wall sconce", "wall lamp", "wedding bed-side lamp",
];

const BEHAVIOR: [&str; 31] = [
    "lighting", "illumination", "power socket", "electrical outlet", "alarm clock", "storage",
    "organizer", "humidifier", "bedroom decorative lighting", "smart", "intelligent", "dimmable",
    "adjustable brightness", "bedroom lighting design", "comfortable lighting", "eye-friendly",
    "eye-caring", "decorative effect", "energy-saving", "energy-efficient", "ambiance",
    "atmosphere", "power-saving", "electricity-saving", "controllable", "light", "aromatherapy",
    "fragrance", "warm light", "soft glow", "dimmer",
];

const FILLER: [&str; 40] = [
    "today", "tonight", "finally", "really", "bedroom", "bed", "room", "evening", "weekend",
    "morning", "feel", "felt", "new", "little", "quite", "week", "home", "time", "corner",
    "pillow", "blanket", "window", "phone", "quiet", "dark", "hours", "share", "honestly",
    "recommend", "favorite", "lamp", "bedside", "table", "nightstand", "setup", "before", "after",
    "sleep", "late", "again",
];

const EMOTION: [&str; 16] = [
    "cozy", "love", "happy", "calm", "relaxing", "warm", "tired", "stressed", "peaceful",
    "exhausted", "lonely", "grateful", "anxious", "content", "soothed", "overwhelmed",
];

const STOPWORDS: [&str; 34] = [
    "a", "an", "the", "and", "or", "but", "i", "my", "me", "we", "our", "is", "was", "are", "it",
    "this", "that", "so", "to", "of", "in", "on", "for", "with", "at", "by", "just", "very", "too",
    "be", "have", "has", "do", "all",
];

const PROMO: [&str; 10] = [
    "discount", "sale", "buy", "link", "promo", "shop", "coupon", "deal", "order", "limited",
];

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn write(name: &str, content: impl AsRef<[u8]>) {
    let path = fixtures_dir().join(name);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).unwrap();
    }
    fs::write(&path, content).unwrap();
    println!("wrote {}", path.display());
}

fn sentence(rng: &mut ChaCha8Rng, persona: &Persona, with_keyword: bool) -> String {
    let mut words: Vec<String> = Vec::new();
    let own = rng.random_range(5..=8);
    for _ in 0..own {
        words.push(persona.words.choose(rng).unwrap().to_string());
    }
    for _ in 0..rng.random_range(2..=5) {
        words.push(FILLER.choose(rng).unwrap().to_string());
    }
    for _ in 0..rng.random_range(3..=6) {
        words.push(STOPWORDS.choose(rng).unwrap().to_string());
    }
    if rng.random_bool(0.6) {
        words.push(EMOTION.choose(rng).unwrap().to_string());
    }
    words.shuffle(rng);
    if with_keyword {
        let kw = if rng.random_bool(0.5) {
            SITUATION.choose(rng).unwrap()
        } else {
            BEHAVIOR.choose(rng).unwrap()
        };
        let at = rng.random_range(0..=words.len());
        words.insert(at, kw.to_string());
    }
    let mut text = words.join(" ");
    if let Some(first) = text.get(0..1) {
        text.replace_range(0..1, &first.to_uppercase());
    }
    text.push(if rng.random_bool(0.3) { '!' } else { '.' });
    text
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut lines: Vec<String> = Vec::new();
    let mut gold: Vec<String> = Vec::new();
    let mut next_id = 0usize;
    let mut post_id = || {
        next_id += 1;
        format!("p{next_id:04}")
    };

    // 38 ordinary users; persona assignment follows the expected shares.
    let mut persona_of_user = Vec::new();
    for (i, p) in PERSONAS.iter().enumerate() {
        let n = (p.share * 38.0).round() as usize;
        persona_of_user.extend(std::iter::repeat_n(i, n));
    }
    persona_of_user.truncate(38);
    while persona_of_user.len() < 38 {
        persona_of_user.push(1);
    }
    persona_of_user.shuffle(&mut rng);

    let mut budget = 500 - 2 * 12 - 7; // commercial posts and planted defects
    let users = persona_of_user.len();
    let mut plan: Vec<usize> = (0..users).map(|_| 8).collect();
    budget -= 8 * users;
    // a few heavy users exceed the 20-post expansion cap
    for u in [0, 7, 19] {
        plan[u] += 16;
        budget -= 16;
    }
    while budget > 0 {
        let u = rng.random_range(0..users);
        if plan[u] < 20 || [0, 7, 19].contains(&u) && plan[u] < 26 {
            plan[u] += 1;
            budget -= 1;
        }
    }

    let mut first_text: Option<(String, String)> = None;
    for (u, &pi) in persona_of_user.iter().enumerate() {
        let persona = &PERSONAS[pi];
        let user_id = format!("u{u:03}");
        // the last two users never mention the product: excluded at keyword filtering
        let keyword_posts = if u >= users - 2 { 0 } else { rng.random_range(1..=3) };
        for k in 0..plan[u] {
            let id = post_id();
            let ts = T0 + rng.random_range(0..60) * DAY + rng.random_range(0..DAY);
            let text = sentence(&mut rng, persona, k < keyword_posts);
            let mut rec = json!({
                "post_id": id,
                "user_id": user_id,
                "text": text,
                "timestamp": ts,
                "profile_tags": [persona.name],
            });
            if !rng.random_bool(0.1) {
                rec["likes"] = json!(rng.random_range(0..500));
            }
            if !rng.random_bool(0.1) {
                rec["comments"] = json!(rng.random_range(0..80));
            }
            if first_text.is_none() {
                first_text = Some((user_id.clone(), text.clone()));
            }
            lines.push(rec.to_string());
            gold.push(json!({"post_id": id, "label": persona.id}).to_string());
        }
    }

    // two commercial accounts: a burst of promotional posts within one day
    for c in 0..2 {
        let user_id = format!("shop{c}");
        for k in 0..12 {
            let mut words = vec![SITUATION[k % SITUATION.len()].to_string()];
            for _ in 0..4 {
                words.push(PROMO.choose(&mut rng).unwrap().to_string());
            }
            for _ in 0..4 {
                words.push(FILLER.choose(&mut rng).unwrap().to_string());
            }
            words.shuffle(&mut rng);
            lines.push(
                json!({
                    "post_id": post_id(),
                    "user_id": user_id,
                    "text": words.join(" "),
                    "timestamp": T0 + 10 * DAY + k as u64 * 3_000,
                    "likes": 3,
                    "comments": 0,
                })
                .to_string(),
            );
        }
    }

    // planted defects: empty text, duplicate post ids, reposted text
    let (dup_user, dup_text) = first_text.unwrap();
    lines.push(json!({"post_id": post_id(), "user_id": "u001", "text": "", "timestamp": T0 + DAY}).to_string());
    lines.push(json!({"post_id": post_id(), "user_id": "u002", "text": "   ", "timestamp": T0 + DAY}).to_string());
    for k in 0..2 {
        lines.push(
            json!({"post_id": "p0001", "user_id": "u000", "text": format!("Duplicate id {k} bedside lamp"), "timestamp": T0 + 2 * DAY})
                .to_string(),
        );
    }
    for k in 0..3 {
        lines.push(
            json!({"post_id": post_id(), "user_id": dup_user, "text": format!("  {}  ", dup_text.to_uppercase()), "timestamp": T0 + (3 + k) * DAY})
                .to_string(),
        );
    }
    assert_eq!(lines.len(), 500, "fixture must hold exactly 500 valid records");

    lines.shuffle(&mut rng);
    // malformed lines that the loader reports and skips
    lines.insert(137, "{\"post_id\": \"broken\", \"user_id\": ".to_string());
    lines.insert(311, json!({"user_id": "u005", "text": "no id", "timestamp": T0}).to_string());
    write("posts.jsonl", lines.join("\n") + "\n");
    write("gold.jsonl", gold.join("\n") + "\n");

    // embeddings: persona words cluster, everything else is random
    let labels: Vec<(String, String)> = PERSONAS.iter().map(|p| (p.id.into(), p.name.into())).collect();
    let vocab: Vec<Vec<String>> = PERSONAS.iter().map(|p| p.words.iter().map(|w| w.to_string()).collect()).collect();
    let mut filler: Vec<String> = FILLER.iter().chain(EMOTION.iter()).chain(PROMO.iter()).map(|w| w.to_string()).collect();
    for kw in SITUATION.iter().chain(BEHAVIOR.iter()) {
        for w in kw.split(' ') {
            if !filler.iter().any(|f| f == w) && !vocab.iter().flatten().any(|v| v == w) {
                filler.push(w.to_string());
            }
        }
    }
    let spec = WorldSpec {
        dimension: 24,
        noise: 0.5,
        features_per_category: 8,
        ..Default::default()
    };
    let world = SyntheticWorld::build(&spec, &labels, vocab, filler, SEED);
    let mut emb = Vec::new();
    world.store.write(&mut emb).unwrap();
    write("embeddings.txt", emb);

    // taxonomy as the mock model would return it
    let categories: Vec<_> = PERSONAS
        .iter()
        .zip(&world.categories)
        .map(|(p, c)| {
            json!({
                "name": p.name,
                "description": p.description,
                "demographic_note": p.demographic,
                "expected_share": p.share,
                "features": c.features.iter().map(|f| json!({"token": f.token, "weight": (f.weight * 100.0).round() / 100.0})).collect::<Vec<_>>(),
            })
        })
        .collect();
    let taxonomy = json!({
        "categories": categories,
        "rationale": "Five night-time routines recur across the sample: wellness rituals, late entertainment, bedroom styling, infant care and work spilling into the evening.",
    });
    write("mock_llm/default.json", serde_json::to_string_pretty(&taxonomy).unwrap() + "\n");
    write(
        "mock_llm_malformed/default.json",
        "I looked at the posts and I think the users fall into a handful of groups, mostly night owls and parents.\n",
    );

    let mut toml = String::from("# Persona categories with weighted feature words.\n");
    for (p, c) in PERSONAS.iter().zip(&world.categories) {
        let feats: Vec<String> = c.features.iter().map(|f| format!("\"{}:{:.2}\"", f.token, f.weight)).collect();
        writeln!(
            toml,
            "\n[[category]]\nid = \"{}\"\nname = \"{}\"\ndescription = \"{}\"\ndemographic_note = \"{}\"\nexpected_share = {}\nfeatures = [{}]",
            p.id, p.name, p.description, p.demographic, p.share, feats.join(", ")
        )
        .unwrap();
    }
    write("personas.toml", toml);

    let quote = |items: &[&str]| items.iter().map(|s| format!("  \"{s}\",")).collect::<Vec<_>>().join("\n");
    write(
        "keywords.toml",
        format!(
            "# Product keyword framework for bedside lighting.\nmatch_mode = \"union\"\n\nsituation = [\n{}\n]\n\nbehavior = [\n{}\n]\n",
            quote(&SITUATION),
            quote(&BEHAVIOR)
        ),
    );
    write(
        "cleaning.toml",
        format!(
            "max_posts_per_day = 10.0\nmax_promo_density = 0.15\npromo_lexicon = [\n{}\n]\n",
            quote(&PROMO)
        ),
    );
    write("stopwords_en.txt", format!("# English stop words\n{}\n", STOPWORDS.join("\n")));
    write("emotion_lexicon.txt", format!("# Emotional descriptors\n{}\n", EMOTION.join("\n")));
    write(
        "stopwords_zh.txt",
        "# 中文停用词\n的\n了\n在\n是\n我\n也\n和\n就\n都\n很\n吧\n啊\n",
    );
    write(
        "dict_zh.txt",
        "# 分词词典\n床头灯\n台灯\n落地灯\n小夜灯\n护眼\n卧室\n睡前\n冥想\n瑜伽\n追剧\n熬夜\n游戏\n宝宝\n喂奶\n加班\n工作\n氛围\n灯光\n温暖\n喜欢\n今天\n晚上\n",
    );
    write(
        "costar.toml",
        r#"context = """
Posts collected from a lifestyle social network. Authors were first found through
posts about bedside lighting, then their recent posts were gathered to show their
evening and bedtime routines."""

objective = """
Identify the distinct user personas in these posts based on pre-sleep behaviour and
bedroom activities rather than demographics. For each persona give weighted feature
words that a classifier can match against post text."""

style = """
Analytical and concise, like a design researcher's synthesis notes."""

tone = """
Neutral and evidence-based; do not invent behaviour that the posts do not show."""

audience = """
Product designers and marketers at a lighting manufacturer."""

response = """
Four to six personas. Feature words must be single lowercase words that appear in
the posts; weights between 0.5 and 2 reflect how characteristic a word is."""
"#,
    );
    write(
        "pipeline.toml",
        r#"# End-to-end configuration for the bundled fixture corpus.

[corpus]
posts = "posts.jsonl"
keywords = "keywords.toml"
cleaning = "cleaning.toml"
emotion_lexicon = "emotion_lexicon.txt"
expand_k = 20

[text]
mode = "whitespace"
stopwords = "stopwords_en.txt"

[embedding]
path = "embeddings.txt"

[extraction]
template = "costar.toml"
sample_size = 120
batch_size = 120
seed = 42

[llm]
mock_mode = true
mock_dir = "mock_llm"
retries = 2

[review]
quorum = 1

[classifier]
threshold = 0.35
max_recycle_rounds = 3
strategy = "max_token"

[evaluation]
gold = "gold.jsonl"
"#,
    );
}
