"""Torch dataset turning DepthSamples into FOV aligned network inputs."""
import numpy as np
import torch
from torch.utils.data import Dataset

from bincore import DepthMap
from depth_model import image_tensor
from domains import LABEL_PERCENTILE, rd_label
from errors import DatasetError
from fov_alignment import align_fov
from rgbd_samples import augment


class AlignedDepthDataset(Dataset):
    """Aligned image, depth, padding and range domain label per sample.

    Items are dicts with 'image' (3, h, w), 'depth' (h, w), 'valid' (h, w),
    'pad_mask' (h, w), 'label' and 'index'.
    """

    def __init__(self, samples, fov, rds, train=False, seed=0,
                 percentile=LABEL_PERCENTILE):
        """Constructor

        :param Sequence samples: Indexable DepthSamples
        :param FovSpec fov: Target FOV and resolution
        :param RangeDomainSet rds: Range domains for labels
        :param bool train: Apply augmentation
        :param int seed: Augmentation seed
        :param float percentile: Label percentile
        """
        self.samples = samples
        self.fov = fov
        self.rds = rds
        self.train = train
        self.seed = seed
        self.percentile = percentile
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        sample = self.samples[index]
        if self.train:
            sample = augment(sample, self.seed + self.epoch * len(self) + index)
        aligned = align_fov(sample.rgb, sample.depth, sample.intrinsics, self.fov)
        depth = aligned.depth
        if not depth.valid.any():
            raise DatasetError(
                "Sample %s has no valid depth inside the target FOV"
                % sample.meta.get('frame_id', index)
            )
        return {
            'image': image_tensor(aligned.image),
            'depth': torch.from_numpy(np.ascontiguousarray(depth.depth, dtype=np.float32)),
            'valid': torch.from_numpy(np.ascontiguousarray(depth.valid)),
            'pad_mask': torch.from_numpy(np.ascontiguousarray(aligned.pad_mask)),
            'label': torch.tensor(rd_label(depth, self.rds, self.percentile)),
            'index': torch.tensor(index)
        }


def batch_depth(batch, device=None, dtype=torch.float32):
    """Return (images, DepthMap, labels, pad_mask) of a collated batch."""
    images = batch['image'].to(device=device, dtype=dtype)
    gt = DepthMap(
        batch['depth'].to(device=device, dtype=dtype),
        batch['valid'].to(device=device)
    )
    return images, gt, batch['label'].to(device), batch['pad_mask'].to(device)
