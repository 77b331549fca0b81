mod common;

use gta_core::bundle::{split_corpus, Bundle};
use gta_core::classifier::{train_naive_bayes, LabelKind};
use gta_core::config::EngineConfig;
use gta_core::corpus::{default_setup, generate_corpus, LabeledText};
use gta_core::eval::{grammar_rate, topic_accuracy};
use gta_core::vocab::{Rng, TokenId};

use common::*;

const PER_TOPIC: usize = 2000;

fn trained() -> (EngineConfig, Vec<LabeledText>, Bundle) {
    let cfg = EngineConfig::default();
    let setup = default_setup();
    let corpus = generate_corpus(&cfg.corpus.spec(), &setup.grammar, &setup.vocab, PER_TOPIC).unwrap();
    let bundle = Bundle::train_with(&cfg, &corpus, setup.vocab, setup.grammar).unwrap();
    (cfg, corpus, bundle)
}

#[test]
fn random_strings_are_rarely_grammatical() {
    let setup = default_setup();
    let words: Vec<TokenId> = (2..setup.vocab.len() as TokenId).collect();
    let mut rng = Rng::new(12);
    let texts: Vec<Vec<TokenId>> = (0..10_000).map(|_| random_tokens(&mut rng, &words, 8)).collect();
    assert!(grammar_rate(&texts, &setup.grammar).unwrap() < 0.05);

    // Corpus texts, by contrast, all parse.
    let corpus = generate_corpus(&setup.spec, &setup.grammar, &setup.vocab, 50).unwrap();
    assert_eq!(grammar_rate(&corpus.iter().map(|t| &t.tokens[..]).collect::<Vec<_>>(), &setup.grammar).unwrap(), 1.0);
}

#[test]
fn bundle_classifiers_and_operators_behave() {
    let (cfg, corpus, bundle) = trained();
    let parts = split_corpus(&corpus, cfg.gate.split, cfg.seed);

    // The topic classifier generalizes to texts it never saw.
    let mut total = 0.0;
    for topic in &bundle.topics {
        let held: Vec<&[TokenId]> = parts.lm.iter().filter(|t| &t.topic == topic).map(|t| &t.tokens[..]).collect();
        let acc = topic_accuracy(&held, topic, &bundle.eval_topic).unwrap();
        // Same number counted by hand.
        let idx = bundle.eval_topic.class_index(topic).unwrap();
        let hits = held.iter().filter(|t| bundle.eval_topic.predict(t) == idx).count();
        assert!((acc - hits as f64 / held.len() as f64).abs() < 1e-15);
        total += acc;
    }
    let mean = total / bundle.topics.len() as f64;
    assert!(mean > 0.85, "held-out topic accuracy {mean}");

    // Retraining on the eval part reproduces the stored classifier.
    let again = train_naive_bayes(&parts.eval, LabelKind::Topic, bundle.vocab.len()).unwrap();
    assert_eq!(again.to_json(&bundle.vocab), bundle.eval_topic.to_json(&bundle.vocab));

    // A planted lexicon token raises the gate score, and a permissive gate
    // catches nearly every held-out toxic text.
    let gate = bundle.gate(0.005).unwrap();
    let lexicon = cfg.corpus.spec().lexicon_ids(&bundle.vocab);
    for t in parts.eval.iter().filter(|t| !t.toxic).take(50) {
        for &x in &lexicon {
            let mut planted = t.tokens.to_vec();
            planted.push(x);
            assert!(gate.score(&planted) > 10.0 * gate.score(&t.tokens));
        }
    }
    let toxic: Vec<&LabeledText> = parts.eval.iter().filter(|t| t.toxic).collect();
    let caught = toxic.iter().filter(|t| gate.gate(&t.tokens) == 1).count();
    assert!(caught as f64 >= 0.95 * toxic.len() as f64, "{caught} of {}", toxic.len());

    // The prompt-tuned source puts less weight on the lexicon than the base.
    let words: Vec<TokenId> = (2..bundle.vocab.len() as TokenId).collect();
    let mut rng = Rng::new(5);
    let (mut src, mut base) = (0.0, 0.0);
    for i in 0..100 {
        let topic = &bundle.topics[i % bundle.topics.len()];
        let mut ctx = bundle.prompt(topic).unwrap();
        let len = (rng.next_u64() % 6) as usize;
        ctx.extend(random_tokens(&mut rng, &words, len));
        let mass = |d: &gta_core::vocab::Distribution| lexicon.iter().map(|&t| d.get(t)).sum::<f64>();
        src += mass(&bundle.source.next_token_dist(&ctx));
        base += mass(&bundle.base.next_token_dist(&ctx));
    }
    assert!(src < base, "source {src} vs base {base}");
}
