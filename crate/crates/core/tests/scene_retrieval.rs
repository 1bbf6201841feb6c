use fscil_seg::datamodel::{generate_scene_in_archetype, generate_synthetic_scene, SyntheticWorldSpec};
use fscil_seg::network::{GridEmbedder, SceneEmbedder};
use fscil_seg::retrieval::cosine_distance;

#[test]
fn within_archetype_distance_beats_cross_archetype_over_200_scenes() {
    let spec = SyntheticWorldSpec::driving();
    let e = GridEmbedder::default();
    let scenes: Vec<(usize, Vec<f64>)> = (0..200)
        .map(|seed| {
            let s = generate_synthetic_scene(&spec, seed).unwrap();
            (s.archetype, e.embed(&s.image).unwrap())
        })
        .collect();
    let archetypes: std::collections::BTreeSet<usize> = scenes.iter().map(|s| s.0).collect();
    assert_eq!(archetypes.len(), 4);
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..scenes.len() {
        for j in i + 1..scenes.len() {
            let d = cosine_distance(&scenes[i].1, &scenes[j].1);
            if scenes[i].0 == scenes[j].0 {
                within += d;
                nw += 1;
            } else {
                cross += d;
                nc += 1;
            }
        }
    }
    let (within, cross) = (within / nw as f64, cross / nc as f64);
    assert!(within < cross, "within {within} cross {cross}");
}

#[test]
fn same_archetype_pairs_are_closer_on_average_over_50_pairs() {
    let spec = SyntheticWorldSpec::driving();
    let e = GridEmbedder::default();
    let embed = |a: usize, seed: u64| {
        e.embed(&generate_scene_in_archetype(&spec, a, seed).unwrap().image)
            .unwrap()
    };
    let (mut same, mut diff) = (0.0, 0.0);
    for k in 0..50u64 {
        let a = (k % 4) as usize;
        let b = (a + 1 + (k as usize / 4) % 3) % 4;
        let anchor = embed(a, 1000 + k);
        same += cosine_distance(&anchor, &embed(a, 2000 + k));
        diff += cosine_distance(&anchor, &embed(b, 3000 + k));
    }
    assert!(same < diff, "same {} diff {}", same / 50.0, diff / 50.0);
}
