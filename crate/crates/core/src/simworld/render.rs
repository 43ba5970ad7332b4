use super::WorldState;

/// Class-indexed object colours. Channel sums stay below 1.5 so the white
/// gripper marker is always the brightest feature in the third view.
pub const OBJECT_PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.95],
    [0.85, 0.55, 0.00],
    [0.70, 0.10, 0.70],
    [0.00, 0.65, 0.70],
    [0.55, 0.35, 0.15],
    [0.95, 0.40, 0.55],
];

pub const RECEPTACLE_PALETTE: [[f32; 3]; 3] = [[0.55, 0.05, 0.05], [0.05, 0.15, 0.55], [0.45, 0.45, 0.45]];

pub const TABLE_COLOR: [f32; 3] = [0.1, 0.1, 0.1];
pub const OFF_TABLE_COLOR: [f32; 3] = [0.0, 0.0, 0.0];
const MARKER_RADIUS_PX: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraView {
    Third,
    Wrist,
}

/// An orthographic top-down camera. The third view sees the whole table; the
/// wrist view sees a `window`-wide square centred on the gripper.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub view: CameraView,
    pub resolution: usize,
    pub window: f32,
}

impl CameraModel {
    pub fn third(resolution: usize) -> Self {
        assert!(resolution >= 8, "camera resolution must be at least 8");
        Self {
            view: CameraView::Third,
            resolution,
            window: 1.0,
        }
    }

    pub fn wrist(resolution: usize, window: f32) -> Self {
        assert!(resolution >= 8, "camera resolution must be at least 8");
        assert!(window > 0.0 && window <= 1.0, "wrist window must be in (0, 1]");
        Self {
            view: CameraView::Wrist,
            resolution,
            window,
        }
    }
}

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub resolution: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, col: usize, row: usize) -> [f32; 3] {
        let i = (row * self.resolution + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Third-view pixel coordinates `(u, v)` of a table point: `u = x·G`,
/// `v = (1 − y)·G`.
pub fn project_to_pixel(world_xy: [f32; 2], camera: &CameraModel) -> [f32; 2] {
    let g = camera.resolution as f32;
    [world_xy[0] * g, (1.0 - world_xy[1]) * g]
}

pub fn render(state: &WorldState, camera: &CameraModel) -> Image {
    let res = camera.resolution;
    let mut data = vec![0.0; res * res * 3];
    let (origin, span) = match camera.view {
        CameraView::Third => ([0.0, 1.0], 1.0),
        CameraView::Wrist => {
            let h = camera.window / 2.0;
            ([state.gripper[0] - h, state.gripper[1] + h], camera.window)
        }
    };
    for row in 0..res {
        for col in 0..res {
            let x = origin[0] + (col as f32 + 0.5) / res as f32 * span;
            let y = origin[1] - (row as f32 + 0.5) / res as f32 * span;
            let mut color = if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                TABLE_COLOR
            } else {
                OFF_TABLE_COLOR
            };
            for r in &state.receptacles {
                if super::dist(r.pos, [x, y]) <= r.radius {
                    color = RECEPTACLE_PALETTE[r.class_id % RECEPTACLE_PALETTE.len()];
                }
            }
            for o in &state.objects {
                if super::dist(o.pos, [x, y]) <= o.radius {
                    color = OBJECT_PALETTE[o.class_id % OBJECT_PALETTE.len()];
                }
            }
            data[(row * res + col) * 3..][..3].copy_from_slice(&color);
        }
    }
    if camera.view == CameraView::Third {
        let [u, v] = project_to_pixel(state.gripper_xy(), camera);
        for row in 0..res {
            for col in 0..res {
                let d = ((col as f32 + 0.5 - u).powi(2) + (row as f32 + 0.5 - v).powi(2)).sqrt();
                if d < MARKER_RADIUS_PX {
                    let w = 1.0 - 0.5 * d / MARKER_RADIUS_PX;
                    data[(row * res + col) * 3..][..3].fill(w);
                }
            }
        }
    }
    Image { resolution: res, data }
}
