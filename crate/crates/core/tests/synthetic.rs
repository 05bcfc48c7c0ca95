use uivlm_core::episode::{corpus_hash, load_corpus, write_corpus};
use uivlm_core::matcher::MatchConfig;
use uivlm_core::synthetic::{
    generate_corpus, generate_episodes, replay_reaches_goal, single_view_conflicts,
    GeneratorConfig, TaskFamily,
};
use uivlm_core::vocab::UNK;
use uivlm_core::{sequence, DeviceAction, Vocab};

#[test]
fn every_episode_replays_to_its_goal() {
    let eps = generate_episodes(&GeneratorConfig::new(400, 5)).unwrap();
    for g in &eps {
        assert!(replay_reaches_goal(&g.task, &g.episode), "{}", g.episode.id);
        assert_eq!(
            g.episode.steps.last().unwrap().gold_action,
            DeviceAction::TaskComplete
        );
    }
    for fam in TaskFamily::ALL {
        assert!(
            eps.iter().any(|g| g.task.family == fam),
            "{fam} never sampled"
        );
    }
}

#[test]
fn gold_taps_hit_exactly_one_widget() {
    let eps = generate_episodes(&GeneratorConfig::new(300, 9)).unwrap();
    for g in &eps {
        for s in &g.episode.steps {
            if let DeviceAction::DualPoint { touch, lift } = &s.gold_action {
                if touch == lift {
                    let hits = s.bboxes.iter().filter(|b| b.contains(touch)).count();
                    assert_eq!(hits, 1, "{}", g.episode.id);
                }
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = GeneratorConfig::new(500, 11);
    let (a, ma) = generate_corpus(&cfg).unwrap();
    let (b, mb) = generate_corpus(&cfg).unwrap();
    assert_eq!(corpus_hash(&a), corpus_hash(&b));
    assert_eq!(ma, mb);
    assert_eq!(ma.totals.episodes, 500);
    let (c, _) = generate_corpus(&GeneratorConfig::new(500, 12)).unwrap();
    assert_ne!(corpus_hash(&a), corpus_hash(&c));
}

#[test]
fn memory_task_is_ambiguous_without_history() {
    let cfg = GeneratorConfig::new(100, 4).with_family(TaskFamily::TwoStepMemory);
    let (corpus, _) = generate_corpus(&cfg).unwrap();
    for ep in corpus.episodes() {
        assert!(
            !single_view_conflicts(ep, &MatchConfig::default()).is_empty(),
            "{}",
            ep.id
        );
    }
    // The other families never repeat a screen with a different action.
    let cfg = GeneratorConfig::new(200, 4);
    let (corpus, _) = generate_corpus(&cfg).unwrap();
    for ep in corpus
        .episodes()
        .iter()
        .filter(|e| e.subset != "two_step_memory")
    {
        assert!(
            single_view_conflicts(ep, &MatchConfig::default()).is_empty(),
            "{}",
            ep.id
        );
    }
}

#[test]
fn generated_corpora_tokenize_without_unk() {
    let v = Vocab::standard();
    let (corpus, _) = generate_corpus(&GeneratorConfig::new(300, 2)).unwrap();
    for ep in corpus.episodes() {
        let t = sequence::build_trajectory(ep, 16, &v).unwrap();
        t.check().unwrap();
        assert!(!t.token_ids.contains(&UNK), "{}", ep.id);
        assert!(t.len() <= 256, "{} has {} tokens", ep.id, t.len());
    }
}

#[test]
fn corpus_survives_disk_round_trip() {
    let (corpus, _) = generate_corpus(&GeneratorConfig::new(40, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back.episodes(), corpus.episodes());
    assert_eq!(corpus_hash(&back), corpus_hash(&corpus));
}
