//! Property tests over generated task files, metadata, and the history
//! tape.

use proptest::prelude::*;

use std::path::{Path, PathBuf};

use scifi_core::memory::{EventFilter, EventKind, MemoryStore, NewHistoryEvent};
use scifi_core::sam::{parse_sam, render_source, MountMode, MountSpec, NodeId, TaskMetadata};
use scifi_core::sandbox::resolve_resources;
use scifi_core::store::{RunId, StorePaths};

/// Single-line body text that cannot collide with the grammar.
fn body_text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9][a-zA-Z0-9 .,_-]{0,38}"
}

/// Titles must not be reserved section names.
fn title_text() -> impl Strategy<Value = String> {
    body_text().prop_filter("reserved section name", |t| {
        let lowered = t.trim().to_ascii_lowercase();
        !["context", "to-do", "expectation"].contains(&lowered.as_str())
    })
}

#[derive(Debug, Clone)]
struct GenNode {
    title: String,
    context: Option<String>,
    todo: String,
    expectation: String,
    children: Vec<GenNode>,
}

fn gen_node(depth: u32) -> impl Strategy<Value = GenNode> {
    let leaf = (
        title_text(),
        proptest::option::of(body_text()),
        body_text(),
        body_text(),
    )
        .prop_map(|(title, context, todo, expectation)| GenNode {
            title,
            context,
            todo,
            expectation,
            children: vec![],
        });
    leaf.prop_recursive(depth, 8, 3, |inner| {
        (
            title_text(),
            proptest::option::of(body_text()),
            body_text(),
            body_text(),
            proptest::collection::vec(inner, 0..3),
        )
            .prop_map(|(title, context, todo, expectation, children)| GenNode {
                title,
                context,
                todo,
                expectation,
                children,
            })
    })
}

fn render_gen(node: &GenNode, level: usize, out: &mut String) {
    let h = "#".repeat(level);
    out.push_str(&format!("{h} {}\n\n", node.title));
    let s = "#".repeat(level + 1);
    if let Some(context) = &node.context {
        out.push_str(&format!("{s} Context\n{context}\n\n"));
    }
    out.push_str(&format!("{s} To-do\n{}\n\n", node.todo));
    out.push_str(&format!("{s} Expectation\n{}\n\n", node.expectation));
    for child in &node.children {
        render_gen(child, level + 1, out);
    }
}

fn gen_task_file() -> impl Strategy<Value = String> {
    (
        gen_node(2),
        1u64..5000,
        1u32..500,
        any::<bool>(),
        any::<bool>(),
        proptest::collection::vec("[a-z][a-z0-9_]{0,8}", 0..3),
    )
        .prop_map(|(root, wall, iters, gpu, network, skills)| {
            let mut out = String::from("```meta\n");
            out.push_str(&format!("wall_time_limit: {wall}\n"));
            out.push_str(&format!("max_iterations: {iters}\n"));
            out.push_str(&format!("gpu: {gpu}\n"));
            out.push_str(&format!("network: {network}\n"));
            if !skills.is_empty() {
                out.push_str(&format!("skills: {}\n", skills.join(", ")));
            }
            out.push_str("```\n\n");
            render_gen(&root, 1, &mut out);
            out
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Determinism: same bytes, bit-identical serialized documents.
    #[test]
    fn parse_is_bit_reproducible(raw in gen_task_file()) {
        let a = parse_sam(&raw, Path::new("/gen.md")).unwrap();
        let b = parse_sam(&raw, Path::new("/gen.md")).unwrap();
        prop_assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    // Round-trip: parse(render_source(parse(raw))) is structurally identical.
    #[test]
    fn source_render_round_trips(raw in gen_task_file()) {
        let doc = parse_sam(&raw, Path::new("/gen.md")).unwrap();
        let rendered = render_source(&doc);
        let reparsed = parse_sam(&rendered, Path::new("/gen.md")).unwrap();
        prop_assert_eq!(&reparsed.root, &doc.root);
        prop_assert_eq!(reparsed.metadata.wall_time_limit_secs, doc.metadata.wall_time_limit_secs);
        prop_assert_eq!(reparsed.metadata.max_iterations, doc.metadata.max_iterations);
        prop_assert_eq!(reparsed.metadata.gpu, doc.metadata.gpu);
        prop_assert_eq!(reparsed.metadata.network, doc.metadata.network);
        prop_assert_eq!(&reparsed.metadata.skills, &doc.metadata.skills);
    }

    // Provenance: every expectation is a verbatim substring of the file.
    #[test]
    fn expectations_are_substrings(raw in gen_task_file()) {
        let doc = parse_sam(&raw, Path::new("/gen.md")).unwrap();
        for node in doc.nodes() {
            prop_assert!(raw.contains(&node.expectation));
        }
    }

    // Ids follow document order and are unique at every depth.
    #[test]
    fn ids_are_unique_and_ordered(raw in gen_task_file()) {
        let doc = parse_sam(&raw, Path::new("/gen.md")).unwrap();
        let ids: Vec<&str> = doc.nodes().iter().map(|n| n.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), ids.len());
        prop_assert_eq!(ids[0], "root");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // Default-deny: the resolved mount set is exactly
    // {task folder} U declared mounts, for any metadata.
    #[test]
    fn resolved_mounts_equal_task_folder_plus_declared(
        mount_count in 0usize..4,
        network in any::<bool>(),
        gpu in any::<bool>(),
        modes in proptest::collection::vec(any::<bool>(), 4),
    ) {
        let task = tempfile::tempdir().unwrap();
        let hosts: Vec<tempfile::TempDir> =
            (0..mount_count).map(|_| tempfile::tempdir().unwrap()).collect();
        let mounts: Vec<MountSpec> = hosts
            .iter()
            .enumerate()
            .map(|(i, h)| MountSpec {
                host_path: h.path().to_path_buf(),
                guest_path: PathBuf::from(format!("/guest/{i}")),
                mode: if modes[i] { MountMode::ReadOnly } else { MountMode::ReadWrite },
            })
            .collect();
        let metadata = TaskMetadata { network, gpu, mounts: mounts.clone(), ..TaskMetadata::default() };
        let spec = resolve_resources(&metadata, task.path()).unwrap();

        prop_assert_eq!(spec.mounts.len(), 1 + mounts.len());
        prop_assert_eq!(&spec.mounts[0].host_path, &task.path().to_path_buf());
        prop_assert_eq!(spec.mounts[0].mode, MountMode::ReadWrite);
        prop_assert_eq!(&spec.mounts[1..], &mounts[..]);
        prop_assert_eq!(spec.network, network);
        prop_assert_eq!(spec.gpu, gpu);
    }

    // Append-only tape: any append sequence reads back gap-free in order.
    #[test]
    fn history_reads_back_gap_free(payloads in proptest::collection::vec("[a-z ]{0,20}", 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let store = MemoryStore::new(StorePaths::for_task(dir.path(), &dir.path().join("g")));
        let run = RunId::new("prop");
        let node = NodeId::root();
        for (i, payload) in payloads.iter().enumerate() {
            let seq = store
                .append_history(NewHistoryEvent {
                    run_id: &run,
                    iteration: i as u32 + 1,
                    node_id: &node,
                    kind: EventKind::Judgment,
                    payload,
                    timestamp: i as i64,
                })
                .unwrap();
            prop_assert_eq!(seq, i as u64 + 1);
        }
        let events = store.read_history(&run, &EventFilter::default()).unwrap();
        prop_assert_eq!(events.len(), payloads.len());
        for (i, event) in events.iter().enumerate() {
            prop_assert_eq!(event.sequence, i as u64 + 1);
            prop_assert_eq!(&event.payload, &payloads[i]);
        }
    }
}
