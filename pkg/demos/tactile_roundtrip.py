"""Press a ball into the simulated gel, then recover normals and depth from
the RGB frame alone."""
import numpy as np

from vtsplat.tactile import (ReflectanceModel, SensorSpec, TactileFrame, default_calibration, process_frame,
                             sphere_cap)


def main():
    spec = SensorSpec()
    model = default_calibration(spec)
    print(f"calibration rmse {model.rmse:.2e} from {model.n_labels} labelled pixels")
    radius, depth = 0.004, 0.0005
    truth = sphere_cap(spec, (160.0, 120.0), radius, depth)
    rgb = ReflectanceModel().render_height(truth, spec, noise=0.002, rng=np.random.default_rng(0))
    patch = process_frame(TactileFrame(rgb, spec=spec), model)
    print(f"contact pixels {int(patch.mask.sum())}, recovered peak depth {1e3 * patch.depth.max():.3f} mm "
          f"(pressed {1e3 * depth:.3f} mm)")


if __name__ == "__main__":
    main()
