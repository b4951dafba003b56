use eqprove::expr::{gen_random_expr, Assignment, DEFAULT_MODULUS};
use eqprove::model::{BatchExecutor, Model, ModelConfig};
use eqprove::oracle::{Dataset, Example};
use eqprove::rewrite::inverse;
use eqprove::{apply, apply_path, parse, Expr, PostOrderSeq, RewritePath, Transformation};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn expr_strategy(max_height: usize) -> impl Strategy<Value = Expr> {
    (1..=max_height, any::<u64>(), any::<usize>()).prop_map(|(h, seed, at)| {
        let e = gen_random_expr(1..=h, seed).unwrap();
        let n = e.defocused().length();
        e.refocused(at % n).unwrap()
    })
}

fn transformation() -> impl Strategy<Value = Transformation> {
    (0..8usize).prop_map(|i| Transformation::from_index(i).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn rewrites_preserve_value_and_focus(e in expr_strategy(6), t in transformation(), seed: u64) {
        if let Some(next) = apply(&e, t) {
            prop_assert_eq!(next.focus_count(), 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..3 {
                let a = Assignment::random(&mut rng, DEFAULT_MODULUS);
                prop_assert_eq!(e.evaluate(&a, DEFAULT_MODULUS), next.evaluate(&a, DEFAULT_MODULUS));
            }
            let back = inverse(&e, t).expect("applicable step has an inverse");
            prop_assert_eq!(apply(&next, back), Some(e.clone()));
        }
    }

    #[test]
    fn text_round_trip(e in expr_strategy(7)) {
        prop_assert_eq!(parse(&e.to_string()).unwrap(), e);
    }

    #[test]
    fn postorder_round_trip(e in expr_strategy(7)) {
        let seq = e.encode_postorder();
        prop_assert_eq!(seq.values.len(), e.length());
        prop_assert_eq!(seq.decode().unwrap(), e.clone());
        let rebuilt = PostOrderSeq { values: seq.values.clone(), arities: seq.arities.clone() };
        prop_assert_eq!(rebuilt.decode().unwrap(), e);
    }

    #[test]
    fn path_replay_matches_stepwise_application(
        e in expr_strategy(5),
        steps in proptest::collection::vec(transformation(), 0..12),
    ) {
        let mut cur = e.clone();
        let mut taken = Vec::new();
        for t in steps {
            if let Some(n) = apply(&cur, t) {
                cur = n;
                taken.push(t);
            }
        }
        let path = RewritePath::new(taken);
        prop_assert_eq!(apply_path(&e, &path).unwrap(), cur);
        prop_assert_eq!(RewritePath::from_text(&path.to_text()).unwrap(), path);
    }

    #[test]
    fn dataset_lines_round_trip(a in expr_strategy(5), b in expr_strategy(5), d in 1..11usize, t in transformation()) {
        let ex = Example { source: a, target: b, distance: d, first: t };
        prop_assert_eq!(Example::from_tsv_line(&ex.to_tsv_line()).unwrap(), ex.clone());
        let ds = Dataset::new(vec![ex]);
        let mut buf = Vec::new();
        ds.write_tsv(&mut buf).unwrap();
        prop_assert_eq!(Dataset::read_tsv(&buf[..]).unwrap(), ds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn executor_stacks_balance(exprs in proptest::collection::vec(expr_strategy(5), 1..6)) {
        let model = Model::init(ModelConfig::new(4), 3).unwrap();
        let mut ex = BatchExecutor::new(&model, &exprs);
        let steps = ex.total_steps();
        let mut count = 0;
        loop {
            let more = ex.step();
            count += 1;
            for lane in 0..exprs.len() {
                // a stack pointer always refers to a slot currently on the value stack
                let vs = ex.value_stack(lane).len();
                prop_assert!(ex.pointer_stack(lane).iter().all(|&p| p < vs));
            }
            if !more {
                break;
            }
        }
        prop_assert_eq!(count, steps);
        for lane in 0..exprs.len() {
            prop_assert_eq!(ex.pointer_stack(lane).len(), 1);
        }
        let out = ex.finish();
        for (e, h) in exprs.iter().zip(&out) {
            prop_assert_eq!(h, &model.embed(e));
        }
    }
}
