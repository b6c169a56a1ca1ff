use std::collections::BTreeMap;

use aida_core::catalog::Catalog;
use aida_core::numerals::GroundingIndex;
use aida_core::reward::{
    count_hallucinations, hallucination_value, score_step, JudgeClient, JudgeContext, JudgeRequest, MockJudge,
    RewardParams, StepContext, DOMINANT_SHARE, MINOR_SHARE,
};
use aida_core::rl::{apply_masks, compute_returns, objective, rebn_advantages, StepFlags};
use aida_core::state::{
    AnalysisState, EntrySource, InsightDelta, InsightStatus, ObservationEntry, ObservationType, StateUpdate, Structure,
};
use aida_core::step::{parse_step, StepDraft, ToolCall};
use aida_core::dsl::DslQuery;
use aida_core::warehouse::{Direction, GroundTruth, PlantedCause};
use proptest::prelude::*;

const SEGMENTS: [&str; 3] = ["new", "vip", "old"];

/// Three causes on userLevel whose shares are the normalized weights.
fn truths(w: [f64; 3]) -> Vec<GroundTruth> {
    let total: f64 = w.iter().sum();
    let mut causes: Vec<PlantedCause> = SEGMENTS
        .iter()
        .zip(w)
        .map(|(s, x)| PlantedCause {
            metric: "netGMV".into(),
            dimension: "userLevel".into(),
            segment: s.to_string(),
            direction: Direction::Down,
            share_of_effect: x / total,
        })
        .collect();
    causes.sort_by(|a, b| b.share_of_effect.total_cmp(&a.share_of_effect));
    vec![GroundTruth {
        scenario_id: "t".into(),
        planted_causes: causes,
    }]
}

fn status() -> impl Strategy<Value = InsightStatus> {
    proptest::sample::select(InsightStatus::ALL.to_vec())
}

fn state_with(values: Vec<f64>, titles: &[&str]) -> AnalysisState {
    let mut s = AnalysisState::new(BTreeMap::new(), "why did netGMV fall");
    let update = StateUpdate {
        insight_updates: titles
            .iter()
            .map(|t| InsightDelta {
                title: t.to_string(),
                status: InsightStatus::New,
                proof: "obs:0".into(),
            })
            .collect(),
        observation_appends: vec![ObservationEntry {
            index: 0,
            step: 0,
            source: EntrySource::Environment,
            kind: ObservationType::Csv,
            description: "netGMV by userLevel".into(),
            structure: Structure::default(),
            payload_ref: "obs:0".into(),
            numerals: GroundingIndex::from_values(values),
        }],
        graph_text: None,
    };
    s = s.apply_update(&update).unwrap();
    s.next_step()
}

fn sentence() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            "[a-z]{1,7}",
            Just("userLevel".to_string()),
            proptest::sample::select(SEGMENTS.to_vec()).prop_map(str::to_string),
            (0u32..2000).prop_map(|n| n.to_string()),
            (0.0f64..10.0).prop_map(|x| format!("{x:.1}")),
        ],
        0..12,
    )
    .prop_map(|w| w.join(" "))
}

fn judge(w: [f64; 3], candidate: &InsightDelta, previous: &[InsightDelta]) -> bool {
    let req = JudgeRequest {
        question: "q",
        previous,
        action: "",
        observation: "",
        candidate,
    };
    MockJudge::new(truths(w)).judge(&req).unwrap().valid
}

proptest! {
    #[test]
    fn mock_judge_follows_the_share_rule(
        w in [0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0],
        seg in 0usize..3,
        status in status(),
        proof in prop_oneof![Just(String::new()), sentence()],
        name_dimension in any::<bool>(),
    ) {
        let share = w[seg] / w.iter().sum::<f64>();
        let title = if name_dimension {
            format!("userLevel {} drives the drop", SEGMENTS[seg])
        } else {
            format!("{} drives the drop", SEGMENTS[seg])
        };
        let d = InsightDelta { title, status, proof: proof.clone() };
        // The proof may name further segments; the judge takes the largest.
        let text = format!("{}\n{}", d.title, d.proof);
        let named = (proof.contains("userLevel") || name_dimension).then(|| {
            SEGMENTS
                .iter()
                .zip(w)
                .filter(|(s, _)| text.split(|c: char| !c.is_alphanumeric() && c != '_').any(|t| t.eq_ignore_ascii_case(s)))
                .map(|(_, x)| x / w.iter().sum::<f64>())
                .fold(f64::NAN, f64::max)
        });
        let expected = match named {
            _ if proof.trim().is_empty() => false,
            None => false,
            Some(s) if s.is_nan() => false,
            Some(s) if status == InsightStatus::Refuted => s <= MINOR_SHARE,
            Some(s) => s >= DOMINANT_SHARE,
        };
        prop_assert_eq!(judge(w, &d, &[]), expected, "share {}", share);
        // A repeated New title is never valid.
        if status == InsightStatus::New {
            prop_assert!(!judge(w, &d, std::slice::from_ref(&d)));
        }
    }

    #[test]
    fn hallucination_is_monotone(
        grounded in proptest::collection::vec(1u32..500, 0..6),
        extra in 600u32..900,
    ) {
        let g = GroundingIndex::from_values(grounded.iter().map(|&x| x as f64));
        let text: Vec<String> = grounded.iter().map(u32::to_string).collect();
        let base = count_hallucinations(&text.join(" "), &g);
        prop_assert_eq!((base.m, base.n), (grounded.len(), 0));
        let worse = count_hallucinations(&format!("{} {extra}", text.join(" ")), &g);
        prop_assert_eq!((worse.m, worse.n), (base.m, 1));
        prop_assert!(worse.value() < base.value());
        prop_assert!(base.value() <= 0.1 && worse.value() >= -1.0);
        prop_assert_eq!(hallucination_value(base.m, base.n), base.value());
    }

    #[test]
    fn step_rewards_stay_in_range(
        values in proptest::collection::vec(0.0f64..2000.0, 0..6),
        state_think in sentence(),
        action_think in sentence(),
        new_insights in proptest::collection::vec((sentence(), status(), sentence()), 0..3),
        mangle in 0usize..4,
        w in [0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0],
    ) {
        let prev = state_with(values, &["netGMV fell 30%"]);
        let draft = StepDraft {
            state_think,
            insights: Some(new_insights.into_iter().map(|(t, status, p)| InsightDelta { title: t, status, proof: p }).collect()),
            key_data: None,
            graph: Some("graph TD\n  A --> B".into()),
            action_think,
            tool_call: Some(ToolCall::dsl(&DslQuery::new(&["netGMV"], ("20251001", "20251007")))),
        };
        let mut raw = draft.render();
        match mangle {
            1 => raw = raw.replace("</action_think>", ""),
            2 => raw = raw.replace("\"dsl2data\"", "\"sql\""),
            3 => raw = raw.replacen('[', "{", 1),
            _ => {}
        }
        let step = parse_step(&raw);
        let judge = MockJudge::new(truths(w));
        let params = RewardParams::default();
        let catalog = Catalog::default_catalog();
        let ctx = StepContext {
            prev_state: &prev,
            catalog: &catalog,
            observation: None,
            judge: &judge,
            judge_context: JudgeContext::default(),
            params: &params,
        };
        let s = score_step(&step, &ctx);
        let b = &s.breakdown;
        for flag in [b.step_format, b.schema_insight, b.schema_key_data, b.mermaid_render, b.json_schema, b.script_exec] {
            prop_assert!(flag == 0.0 || flag == -1.0);
        }
        for h in [b.hallu_state, b.hallu_action] {
            prop_assert!((-1.0..=0.1).contains(&h));
        }
        for l in [b.length_state, b.length_action] {
            prop_assert!((0.0..=params.length_scale).contains(&l));
        }
        let g = &params.gain;
        for d in &s.detail.gain.details {
            if d.valid {
                prop_assert!(d.gain >= g.floor && d.gain <= g.base(d.status));
            } else {
                prop_assert_eq!(d.gain, g.invalid_penalty);
            }
        }
        let sum: f64 = s.detail.gain.details.iter().map(|d| d.gain).sum();
        prop_assert!((b.discovery_gain - sum).abs() < 1e-12);
        let i = b.step_format + b.hallu_state + b.hallu_action + b.schema_insight + b.schema_key_data
            + b.mermaid_render + b.json_schema + b.script_exec;
        prop_assert!((b.intermediate_total - i).abs() < 1e-12);
        prop_assert!((b.accumulated_total - (b.length_state + b.length_action + b.discovery_gain)).abs() < 1e-12);
        prop_assert_eq!(b.step_format == -1.0, mangle == 1);
        // An unclosed block swallows the tool call, so 1 also fails the call schema.
        prop_assert_eq!(b.json_schema == -1.0, mangle == 1 || mangle == 2);
        if mangle == 3 {
            prop_assert_eq!(b.schema_insight, -1.0);
            prop_assert!(s.detail.gain.details.is_empty());
        }
    }
}

fn batch() -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 1..6), 1..6)
}

proptest! {
    #[test]
    fn returns_match_the_double_sum(
        steps in proptest::collection::vec((-1.0f64..1.0, -2.0f64..2.0), 1..12),
        gamma in 0.0f64..=1.0,
    ) {
        let (i, a): (Vec<f64>, Vec<f64>) = steps.into_iter().unzip();
        let r = compute_returns(&i, &a, gamma).unwrap();
        for t in 0..i.len() {
            let want = i[t] + (t..a.len()).map(|j| gamma.powi((j - t) as i32) * a[j]).sum::<f64>();
            prop_assert!((r.returns[t] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rebn_commutes_with_permutation(returns in batch(), rot in 0usize..6) {
        let b = rebn_advantages(&returns).unwrap();
        let k = rot % returns.len();
        let mut shuffled = returns.clone();
        shuffled.rotate_left(k);
        let c = rebn_advantages(&shuffled).unwrap();
        let mut expect = b.advantages.clone();
        expect.rotate_left(k);
        for (x, y) in expect.iter().flatten().zip(c.advantages.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let flat: Vec<f64> = b.advantages.iter().flatten().copied().collect();
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        if b.batch_std > 1e-9 {
            let var = flat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn masks_only_touch_positive_advantages(
        returns in batch(),
        bits in proptest::collection::vec(any::<(bool, bool)>(), 36),
        logp in -3.0f64..0.0,
    ) {
        let b = rebn_advantages(&returns).unwrap();
        let mut it = bits.into_iter().cycle();
        let flags: Vec<Vec<StepFlags>> = returns
            .iter()
            .map(|t| t.iter().map(|_| {
                let (s, l) = it.next().unwrap();
                StepFlags { syntax_failed: s, has_invalid_insight: l }
            }).collect())
            .collect();
        let m = apply_masks(&b, &flags).unwrap();
        prop_assert_eq!(&m.advantages, &b.advantages);
        let mut want = 0.0;
        for (n, traj) in flags.iter().enumerate() {
            for (t, f) in traj.iter().enumerate() {
                let a = b.advantages[n][t];
                let masked = a > 0.0 && (f.syntax_failed || f.has_invalid_insight);
                prop_assert_eq!(m.masks[n][t].any(), masked);
                if a <= 0.0 {
                    prop_assert_eq!(m.effective(n, t), a);
                }
                if !masked {
                    want += a * logp;
                }
            }
        }
        let lp: Vec<Vec<f64>> = returns.iter().map(|t| vec![logp; t.len()]).collect();
        let got = objective(&m, &lp).unwrap();
        prop_assert!((got - want / returns.len() as f64).abs() < 1e-9);
    }
}
