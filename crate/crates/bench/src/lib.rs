//! Criterion benchmarks for the growfem kernels.

use std::hint::black_box;

use criterion::{BatchSize, BenchmarkId, Criterion};
use growfem_core::collision::{build_hav, intersects, Cuboid};
use growfem_core::config::MeshConfig;
use growfem_core::fe_space::build_dof_map;
use growfem_core::octree::morton_decode;
use growfem_core::pipeline::run_layer_by_layer;
use growfem_core::solver::{jacobi_pcg, PcgOptions};
use growfem_core::thermal::{assemble_step, BoundarySpec, MaterialTable, SourceTerm, ThermalContext};
use growfem_core::{
    morton_encode, CellStatus, GeometryMap, OctreeMesh, Partition, PipelineConfig, RefinementFlag, RunOptions,
    Transport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform mesh at `base` with the leaves around one corner refined
/// `depth` more times, then balanced.
pub fn graded_mesh(base: u8, depth: u8) -> OctreeMesh {
    let mut mesh = OctreeMesh::uniform(base, 0, base + depth, GeometryMap::unit()).unwrap();
    for _ in 0..depth {
        let flags: Vec<RefinementFlag> = mesh
            .leaves()
            .iter()
            .map(|k| if k.anchor() == [0, 0, 0] { RefinementFlag::Refine } else { RefinementFlag::Keep })
            .collect();
        mesh = mesh.refine_and_coarsen(&flags).unwrap().0;
    }
    mesh
}

pub fn layer_config(layers: usize, max_level: u8) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.mesh = MeshConfig {
        size: 4.0,
        min_level: 2,
        max_level,
        search_min_level: 2,
        ..cfg.mesh
    };
    cfg.process.layer_thickness = 4.0 / (1u32 << max_level) as f64;
    cfg.layers = layers;
    cfg.footprint = Some([1.0, 1.0, 3.0, 3.0]);
    cfg
}

fn morton(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let anchors: Vec<[u32; 3]> = (0..1024)
        .map(|_| std::array::from_fn(|_| rng.gen_range(0..1u32 << 10) << 9))
        .collect();
    c.bench_function("morton/encode_decode_1024", |b| {
        b.iter(|| {
            for a in &anchors {
                let m = morton_encode(10, *a).unwrap();
                black_box(morton_decode(10, m).unwrap());
            }
        })
    });
}

fn balance(c: &mut Criterion) {
    let mut group = c.benchmark_group("balance");
    for depth in [3u8, 5] {
        let mesh = graded_mesh(2, depth);
        group.bench_with_input(BenchmarkId::from_parameter(depth), &mesh, |b, m| {
            b.iter(|| black_box(m.enforce_2to1_balance()))
        });
    }
    group.finish();
}

fn sat(c: &mut Criterion) {
    let cell = Cuboid::aabb([0.0; 3], [0.1; 3]).unwrap();
    let havs: Vec<Cuboid> = (0..256)
        .map(|i| {
            let a = i as f64 * 0.0245;
            build_hav([0.0, 0.0, 0.1], [0.2 * a.cos(), 0.2 * a.sin(), 0.1], 0.05, 0.03, 1.01)
                .unwrap()
                .cuboid()
                .clone()
        })
        .collect();
    c.bench_function("sat/256_pairs", |b| {
        b.iter(|| havs.iter().filter(|h| intersects(black_box(&cell), h)).count())
    });
}

fn thermal(c: &mut Criterion) {
    let mesh = graded_mesh(3, 2).enforce_2to1_balance().0;
    let status = vec![CellStatus::Active; mesh.len()];
    let dofs = build_dof_map(&mesh, &status).unwrap();
    let layout = dofs.layout(&Partition::single(mesh.len()));
    let material = MaterialTable::constant(8.0e-6, 500.0, 0.02).unwrap();
    let bc = BoundarySpec::uniform(1.0e-5, 20.0);
    let transport = Transport::serial();
    let ctx = ThermalContext {
        mesh: &mesh,
        status: &status,
        dofs: &dofs,
        layout: &layout,
        material: &material,
        bc: &bc,
        transport: &transport,
    };
    let u: Vec<f64> = (0..dofs.num_dofs()).map(|i| 20.0 + (i % 17) as f64).collect();
    let mut group = c.benchmark_group("thermal");
    group.bench_function(BenchmarkId::new("assemble", dofs.num_dofs()), |b| {
        b.iter(|| black_box(assemble_step(&ctx, &u, 0.01, &SourceTerm::None).unwrap()))
    });
    let sys = assemble_step(&ctx, &u, 0.01, &SourceTerm::None).unwrap();
    group.bench_function(BenchmarkId::new("pcg", dofs.num_dofs()), |b| {
        b.iter_batched(
            || vec![0.0; u.len()],
            |x0| black_box(jacobi_pcg(&sys.matrix, &sys.rhs, &x0, &PcgOptions::default()).unwrap()),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let cfg = layer_config(4, 5);
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("layer_mode_4_layers", |b| {
        b.iter(|| black_box(run_layer_by_layer(&cfg, &RunOptions::default()).unwrap()))
    });
    group.finish();
}

pub fn benchmarks(c: &mut Criterion) {
    morton(c);
    balance(c);
    sat(c);
    thermal(c);
    pipeline(c);
}
