//! Shared fixtures for the benchmarks.

use sisifus::phantom::{generate_scene, preset_scene, Preset};
use sisifus::sampling::decimate;
use sisifus::{Plane, SamplingMap};

/// Two-class phantom at `size`, its LR lifetimes at `factor`, and the map.
pub struct Fixture {
    pub gt: Plane,
    pub intensity: Plane,
    pub lr: Plane,
    pub map: SamplingMap,
}

pub fn two_class(size: usize, factor: usize) -> Fixture {
    let scene = preset_scene(Preset::TwoClass, size, 1).expect("preset");
    let (gt, intensity) = generate_scene(&scene).expect("scene");
    let map = SamplingMap::for_hr((size, size), factor).expect("map");
    let lr = decimate(&gt, &map).expect("decimate");
    Fixture {
        gt,
        intensity,
        lr,
        map,
    }
}
