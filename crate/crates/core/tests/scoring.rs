//! Task scoring and canonicalization.

use copa_core::catalog::Catalog;
use copa_core::ingest::{canonicalize, score_task, to_model_state, TaskRubric};
use copa_core::model::{CanonicalModel, ModelState, TaskId};
use proptest::prelude::*;

#[test]
fn experts_score_one_and_empty_scores_zero_on_every_rubric() {
    let catalog = Catalog::bundled();
    assert_eq!(catalog.tasks.len(), 3);
    for (task, bundle) in &catalog.tasks {
        let expert = bundle.expert.as_ref().expect("every shipped task has an expert model");
        let s = score_task(expert, task, &bundle.rubric, 0).unwrap();
        assert_eq!(s.value, 1.0, "{task}");
        assert_eq!(s.criteria_met.len(), bundle.rubric.criteria.len());
        let empty = score_task(&CanonicalModel::default(), task, &bundle.rubric, 0).unwrap();
        assert_eq!(empty.value, 0.0, "{task}");
        assert!(empty.criteria_met.is_empty());
    }
}

#[test]
fn shipped_catalog_directory_loads_like_the_bundle() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let loaded = Catalog::load(&dir).unwrap();
    let bundled = Catalog::bundled();
    assert_eq!(loaded.tasks.keys().collect::<Vec<_>>(), bundled.tasks.keys().collect::<Vec<_>>());
    for (task, b) in &loaded.tasks {
        assert_eq!(b.expert, bundled.tasks[task].expert);
    }
}

#[test]
fn three_of_four_equal_criteria_is_three_quarters() {
    let rubric = TaskRubric::from_json(
        r#"{"schema_version": 1, "task": "t", "criteria": [
            {"id": "a", "description": "a", "predicate": {"type": "present", "component": "a-init"}, "weight": 0.25},
            {"id": "b", "description": "b", "predicate": {"type": "present", "component": "b-init"}, "weight": 0.25},
            {"id": "c", "description": "c", "predicate": {"type": "present", "component": "c-init"}, "weight": 0.25},
            {"id": "d", "description": "d", "predicate": {"type": "present", "component": "d-init"}, "weight": 0.25}
        ]}"#,
    )
    .unwrap();
    let task: TaskId = "t".parse().unwrap();
    let mut model = CanonicalModel::default();
    for k in ["a-init", "b-init", "c-init"] {
        model.components.insert(k.into(), format!("{} = 1", &k[..1]));
    }
    assert_eq!(score_task(&model, &task, &rubric, 0).unwrap().value, 0.75);
}

fn catalog() -> &'static Catalog {
    static CATALOG: std::sync::OnceLock<Catalog> = std::sync::OnceLock::new();
    CATALOG.get_or_init(Catalog::bundled)
}

fn expert_states() -> Vec<(TaskId, ModelState)> {
    catalog()
        .tasks
        .iter()
        .map(|(t, b)| (t.clone(), to_model_state(b.expert.as_ref().unwrap(), t.clone(), 0)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn canonical_form_ignores_block_order_and_ids(which in 0usize..3, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (task, state) = expert_states().swap_remove(which);
        let rubric = catalog().rubric(&task).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = state.clone();
        shuffled.blocks.shuffle(&mut rng);
        for (i, b) in shuffled.blocks.iter_mut().enumerate() {
            b.block_id = format!("x{}-{i}", seed % 997);
        }
        let a = canonicalize(&state);
        let b = canonicalize(&shuffled);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(score_task(&a, &task, rubric, 0).unwrap().value, score_task(&b, &task, rubric, 0).unwrap().value);
    }

    #[test]
    fn adding_an_expert_component_never_lowers_the_score(which in 0usize..3, mask in any::<u16>(), extra in 0usize..16) {
        let (task, bundle) = catalog().tasks.iter().nth(which).unwrap();
        let expert = bundle.expert.as_ref().unwrap();
        let keys: Vec<&String> = expert.components.keys().collect();
        let subset = |m: u16| CanonicalModel {
            components: keys.iter().enumerate().filter(|(i, _)| m & (1 << i) != 0).map(|(_, k)| ((*k).clone(), expert.components[*k].clone())).collect(),
        };
        let before = score_task(&subset(mask), task, &bundle.rubric, 0).unwrap().value;
        let after = score_task(&subset(mask | (1 << (extra % keys.len()))), task, &bundle.rubric, 0).unwrap().value;
        prop_assert!(after >= before);
    }
}
