"""Published full-scale reference results.

Desk-scale toy runs cannot reproduce the numbers of the full pretrained
pipeline, so reports compare against these frozen reference tables instead.
``ours`` columns refer to the full-scale run of this model family; SAM-GAN
and CUSP-GAN columns are the published baselines. Values absent from the
sources are ``None``.
"""

# Race-classification accuracy (percent) of age-transformed test images,
# per target age group, with the recomputable improvement columns.
RACE_ACCURACY = {
    20: {"ours": 75.59, "sam": 65.79, "cusp": 78.21},
    30: {"ours": 77.42, "sam": 67.10, "cusp": 78.91},
    40: {"ours": 76.64, "sam": 63.34, "cusp": 78.82},
    50: {"ours": 71.39, "sam": 55.38, "cusp": 70.42},
    60: {"ours": 62.82, "sam": 48.38, "cusp": 53.71},
    70: {"ours": 57.83, "sam": 42.43, "cusp": None},
    80: {"ours": 49.26, "sam": 36.57, "cusp": None},
}
RACE_ACCURACY_IMPROVEMENT = {
    "sam": {20: 9.8, 30: 10.32, 40: 13.3, 50: 16.01, 60: 14.44, 70: 15.4, 80: 12.69},
    "cusp": {20: -2.62, 30: -1.49, 40: -2.18, 50: 0.97, 60: 9.1, 70: None, 80: None},
}

# Per-race precision / recall / F1 of the full-scale model per age group.
PRF_BY_RACE = {
    "Indian": {20: (0.73, 0.78, 0.76), 30: (0.77, 0.79, 0.78), 40: (0.79, 0.72, 0.75),
               50: (0.80, 0.63, 0.70), 60: (0.74, 0.48, 0.58), 70: (0.66, 0.38, 0.48),
               80: (0.57, 0.22, 0.31)},
    "Asian": {20: (0.82, 0.77, 0.80), 30: (0.82, 0.76, 0.79), 40: (0.84, 0.73, 0.78),
              50: (0.82, 0.62, 0.71), 60: (0.75, 0.54, 0.63), 70: (0.71, 0.53, 0.61),
              80: (0.54, 0.57, 0.55)},
    "Black": {20: (0.90, 0.59, 0.71), 30: (0.92, 0.68, 0.78), 40: (0.92, 0.71, 0.80),
              50: (0.93, 0.67, 0.78), 60: (0.94, 0.57, 0.71), 70: (0.94, 0.46, 0.62),
              80: (1.00, 0.25, 0.40)},
    "White": {20: (0.67, 0.86, 0.75), 30: (0.68, 0.86, 0.76), 40: (0.63, 0.89, 0.74),
              50: (0.55, 0.94, 0.69), 60: (0.47, 0.93, 0.62), 70: (0.44, 0.93, 0.60),
              80: (0.41, 0.93, 0.57)},
}

# Identity-preservation cosine similarity (mean, std) per age group.
IDENTITY_PRESERVATION = {
    20: (0.494, 0.089), 30: (0.488, 0.095), 40: (0.463, 0.099), 50: (0.427, 0.102),
    60: (0.413, 0.099), 70: (0.414, 0.095), 80: (0.404, 0.094),
}

# Apparent-age mean absolute error (mean, std) per age group.
AGE_MAE = {
    20: (6.52, 4.54), 30: (4.65, 3.75), 40: (4.83, 3.62), 50: (4.72, 3.61),
    60: (4.66, 3.44), 70: (6.29, 4.45), 80: (9.84, 4.32),
}

# Kinship verification accuracy (percent) per relation: base full-face pairs
# and same-age transformed pairs. The improvement row in the source tables is
# best(aged) - base; KinFaceW-II MD is reported without one (it is negative).
KINSHIP_ACCURACY = {
    "KinFaceW-I": {
        "FD": {"base": 72.10, 20: 76.92, 30: 76.56, 40: 77.32, 50: 76.56, 60: 76.55},
        "FS": {"base": 74.04, 20: 78.53, 30: 78.86, 40: 78.86, 50: 79.19, 60: 78.87},
        "MD": {"base": 83.86, 20: 85.49, 30: 85.43, 40: 85.03, 50: 85.03, 60: 83.86},
        "MS": {"base": 71.52, 20: 71.50, 30: 70.65, 40: 71.50, 50: 71.93, 60: 71.93},
    },
    "KinFaceW-II": {
        "FD": {"base": 85.20, 20: 87.35, 30: 87.73, 40: 87.35, 50: 87.73, 60: 88.10},
        "FS": {"base": 90.00, 20: 90.19, 30: 89.80, 40: 90.39, 50: 89.80, 60: 89.40},
        "MD": {"base": 92.20, 20: 90.39, 30: 90.19, 40: 90.80, 50: 91.40, 60: 91.00},
        "MS": {"base": 88.20, 20: 89.80, 30: 89.40, 40: 89.20, 50: 89.20, 60: 88.00},
    },
}
KINSHIP_IMPROVEMENT = {
    "KinFaceW-I": {"FD": 5.22, "FS": 5.15, "MD": 1.63, "MS": 0.41},
    "KinFaceW-II": {"FD": 2.90, "FS": 0.39, "MD": None, "MS": 1.60},
}


def accuracy_improvement(ours: dict, baseline: dict) -> dict:
    """Per-age difference ``ours - baseline`` over the ages both report."""
    return {age: ours[age] - baseline[age]
            for age in ours if baseline.get(age) is not None and ours.get(age) is not None}


def kinship_improvement(row: dict) -> float:
    """Best transformed accuracy minus the base accuracy (signed)."""
    aged = [v for k, v in row.items() if k != "base"]
    return max(aged) - row["base"]
