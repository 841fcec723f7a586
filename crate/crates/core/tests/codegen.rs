mod common;

use dataflow_hls::codegen::{array_declarations, emit, intermediate_arrays, render_manifest, EmittedDesign};
use dataflow_hls::dse::{optimize, Objective};
use dataflow_hls::model_ingest::{lower_graph, parse_model_str};
use dataflow_hls::resource_model::{CostTable, ResourceBudget};
use dataflow_hls::stream_arch::{build_stream_graph, Storage, StreamGraph};

use common::{load, BENCHMARKS};

fn design(graph: &StreamGraph, dsp: u64) -> (StreamGraph, EmittedDesign) {
    let (fin, sol) = optimize(graph, ResourceBudget { dsp, bram: 288 }, CostTable::default(), Objective::Sum).unwrap();
    let d = emit(&fin, &sol, "top", &CostTable::default()).unwrap();
    (fin, d)
}

/// Pragmas directly under the loop labelled `label`.
fn loop_pragmas<'a>(src: &'a str, label: &str) -> Vec<&'a str> {
    let head = format!("{label}: for ");
    let mut lines = src.lines().skip_while(|l| !l.trim_start().starts_with(&head));
    lines.next().expect("loop label present");
    lines.take_while(|l| l.starts_with("#pragma")).collect()
}

#[test]
fn pragmas_follow_the_solution() {
    for name in BENCHMARKS {
        let (_, graph) = load(name);
        for dsp in [1248, 250, 50] {
            let (g, d) = design(&graph, dsp);
            let src = d.source();
            assert_eq!(d.manifest.pragma_count("DATAFLOW"), 1);
            assert_eq!(src.matches("#pragma HLS DATAFLOW").count(), 1);
            assert_eq!(d.manifest.streams.len(), g.channels.len());
            for ch in &g.channels {
                let decl = d.manifest.streams.iter().find(|s| s.id == ch.name).unwrap();
                assert_eq!((decl.depth, decl.lanes), (ch.depth, ch.width));
                assert!(src.contains(&format!("STREAM variable={}_s depth={}", ch.name, ch.depth)));
            }
            for node in g.compute_nodes() {
                let nest = node.nest.as_ref().unwrap();
                let mut pipelines = 0;
                for (l, lp) in nest.loops.iter().enumerate() {
                    if lp.stream {
                        continue;
                    }
                    let pragmas = loop_pragmas(&src, &format!("{}_{}", node.name, lp.name));
                    let u = nest.effective_unroll(l);
                    let unroll = format!("#pragma HLS UNROLL factor={u}");
                    assert_eq!(pragmas.contains(&unroll.as_str()), u > 1, "{name}/{}/{}: {pragmas:?}", node.name, lp.name);
                    if nest.pipeline == Some(l) {
                        assert!(pragmas.contains(&"#pragma HLS PIPELINE II=1"));
                        pipelines += 1;
                    }
                }
                if nest.pipeline.is_some_and(|p| nest.loops[p].stream) {
                    pipelines += 1;
                }
                assert_eq!(pipelines, nest.pipeline.is_some() as usize, "{name}/{}", node.name);
                for b in &node.buffers {
                    let decl = d.manifest.buffers.iter().find(|x| x.name == b.name).unwrap();
                    assert_eq!(decl.partitions, b.partitions(nest));
                    match decl.storage {
                        Storage::Bram => {
                            assert!(src.contains(&format!("BIND_STORAGE variable={} type=ram_2p impl=bram", b.name)));
                            if decl.partitions > 1 {
                                assert!(src.contains(&format!("ARRAY_PARTITION variable={} cyclic factor={}", b.name, decl.partitions)));
                            }
                        }
                        Storage::Registers => {
                            assert!(src.contains(&format!("ARRAY_PARTITION variable={} complete dim=0", b.name)));
                        }
                    }
                }
            }
            assert!(intermediate_arrays(&src, &g).is_empty());
        }
    }
}

#[test]
fn sliding_window_nodes_carry_shift_logic() {
    let (_, graph) = load("cascade_conv_32");
    let (_, d) = design(&graph, 1248);
    for node in ["conv0", "conv1"] {
        let f = &d.functions.iter().find(|(n, _)| n == node).unwrap().1;
        assert!(f.contains(&format!("{node}_shift_r")));
        assert!(f.contains(&format!("{node}_line[")));
        assert!(f.contains(&format!("{node}_window[")));
        assert!(f.contains("acc = (acc + "));
    }
    let relu = &d.functions.iter().find(|(n, _)| n == "relu0").unwrap().1;
    assert_eq!(relu.matches("#pragma HLS PIPELINE").count(), 1);
}

#[test]
fn lane_count_follows_channel_width() {
    let layers = parse_model_str(
        r#"{"input": {"shape": [1, 4, 8, 8], "dtype": "i8"},
            "layers": [{"name": "relu", "kind": "relu", "inputs": ["input"]}],
            "weights": "random:0"}"#,
    )
    .unwrap();
    let graph = build_stream_graph(&lower_graph(&layers).unwrap(), &layers).unwrap();
    let (g, d) = design(&graph, 1248);
    assert!(g.channels.iter().all(|c| c.width == 4));
    assert!(d.manifest.streams.iter().all(|s| s.lanes == 4));
    let streams: Vec<_> = array_declarations(&d.source())
        .into_iter()
        .filter(|(n, _)| n.ends_with("_s"))
        .collect();
    assert!(streams.iter().all(|(_, lanes)| *lanes == 4), "{streams:?}");
}

#[test]
fn emission_is_deterministic() {
    let (_, graph) = load("residual_32");
    let (_, a) = design(&graph, 250);
    let (_, b) = design(&graph, 250);
    assert_eq!(a.source(), b.source());
    assert_eq!(render_manifest(&a), render_manifest(&b));
}
