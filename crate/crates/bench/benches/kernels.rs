// SPDX-License-Identifier: Apache-2.0

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use tokalign::decode::{map_logits, Combinator, DecodeConfig, DecodeInput, Expert, GuidedDecoder, MultiTokenRule, TokenMap};
use tokalign::dpo::{dpo_grad, DpoBatch, DpoPair};
use tokalign::model::{ArchConfig, ContextEncoding, ModelParams};
use tokalign::pipeline::tokenizer_corpus;
use tokalign::scenegen::{make_dataset, render_view, SceneConfig};
use tokalign::tokenization::{Tokenizer, EOS};

struct Fixture {
    target_tok: Tokenizer,
    reward_tok: Tokenizer,
    target: ModelParams,
    reward: ModelParams,
    inputs: Vec<DecodeInput>,
}

fn fixture() -> Fixture {
    let inv = SceneConfig::default();
    let records = make_dataset(200, 1, &inv).unwrap();
    let corpus = tokenizer_corpus(&records, &inv);
    let target_tok = Tokenizer::merged(&corpus, 150).unwrap();
    let reward_tok = Tokenizer::merged(&corpus, 110).unwrap();
    let arch = ArchConfig::default();
    let target = ModelParams::init(2, arch, &target_tok).unwrap();
    let reward = ModelParams::init(3, arch, &reward_tok).unwrap();
    let inputs = records
        .iter()
        .take(16)
        .map(|r| DecodeInput::new(r.query.text(), &render_view(&r.scene, &inv.render).text()))
        .collect();
    Fixture {
        target_tok,
        reward_tok,
        target,
        reward,
        inputs,
    }
}

fn bench_forward(c: &mut Criterion) {
    let f = fixture();
    let ctx = ContextEncoding {
        query: f.target_tok.encode(&f.inputs[0].query),
        observation: f.target_tok.encode(&f.inputs[0].observation),
        prefix: f.target_tok.encode("table road"),
    };
    c.bench_function("forward_logprobs", |b| b.iter(|| f.target.forward_logprobs(black_box(&ctx)).unwrap()));
}

fn bench_decode(c: &mut Criterion) {
    let f = fixture();
    let mut group = c.benchmark_group("decode");
    for combinator in [Combinator::Base, Combinator::Guided] {
        let cfg = DecodeConfig {
            combinator,
            max_len: 12,
            ..DecodeConfig::default()
        };
        let dec = GuidedDecoder::new(
            Expert::new(&f.target, &f.target_tok).unwrap(),
            Some(Expert::new(&f.reward, &f.reward_tok).unwrap()),
            cfg,
        )
        .unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(combinator.label()), &f.inputs, |b, inputs| {
            b.iter(|| {
                for input in inputs {
                    black_box(dec.decode(input).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn bench_map_logits(c: &mut Criterion) {
    let f = fixture();
    let map = TokenMap::build(&f.reward_tok, &f.target_tok, MultiTokenRule::First).unwrap();
    let v = f.reward_tok.vocab_size();
    let lp: Vec<f64> = (0..v).map(|i| -((i % 17) as f64) - (v as f64).ln()).collect();
    let mut group = c.benchmark_group("map_logits");
    for k in [10usize, 50, v] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| map_logits(black_box(&lp), &map, k, 1e-6).unwrap())
        });
    }
    group.finish();
}

fn bench_dpo_grad(c: &mut Criterion) {
    let f = fixture();
    let tok = &f.reward_tok;
    let pairs: Vec<DpoPair> = f
        .inputs
        .iter()
        .enumerate()
        .map(|(i, input)| {
            let mut y_w = tok.encode("table chair");
            y_w.push(EOS);
            let mut y_l = tok.encode("table chair car dog");
            y_l.push(EOS);
            DpoPair {
                scene_id: i as u64,
                query: tok.encode(&input.query),
                observation: tok.encode(&input.observation),
                y_w,
                y_l,
            }
        })
        .collect();
    let batch = DpoBatch::new(&pairs, 0.1).unwrap();
    c.bench_function("dpo_grad_16_pairs", |b| b.iter(|| dpo_grad(black_box(&f.reward), &batch).unwrap()));
}

criterion_group!(benches, bench_forward, bench_decode, bench_map_logits, bench_dpo_grad);
criterion_main!(benches);
