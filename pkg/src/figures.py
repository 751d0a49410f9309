"""Static figures, each written together with a CSV twin holding the
plotted values."""
import csv
import os

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from eval_metrics import write_series_csv  # noqa: E402

K_SWEEP_FIELDS = ('name', 'k', 'partition', 'delta1', 'rmse')


def write_curves_csv(path, curves):
    """Write curves {label: values} as columns next to a 1-based index."""
    labels = list(curves)
    length = max(len(v) for v in curves.values())
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['index'] + labels)
        for i in range(length):
            writer.writerow([i + 1] + [
                repr(float(curves[label][i])) if i < len(curves[label]) else ''
                for label in labels
            ])


def read_curves_csv(path):
    with open(path, newline='') as fh:
        reader = csv.reader(fh)
        header = next(reader)
        columns = {label: [] for label in header[1:]}
        for row in reader:
            for label, value in zip(header[1:], row[1:]):
                if value != '':
                    columns[label].append(float(value))
    return columns


def write_matrix_csv(path, matrix, row_edges):
    """Write a (buckets, bins) matrix, one row per depth bucket."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['depth_low', 'depth_high'] + [
            'bin%d' % (n + 1) for n in range(matrix.shape[1])
        ])
        for r, row in enumerate(matrix):
            writer.writerow(
                [repr(float(row_edges[r])), repr(float(row_edges[r + 1]))]
                + [repr(float(v)) for v in row]
            )


def read_matrix_csv(path):
    """Return (matrix, row_edges) of a matrix CSV."""
    with open(path, newline='') as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows, dtype=np.float64)
    edges = np.concatenate([data[:, 0], data[-1:, 1]])
    return data[:, 2:], edges


def write_k_sweep_csv(path, rows):
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(K_SWEEP_FIELDS)
        for row in rows:
            writer.writerow([
                row['name'], row['k'], row['partition'],
                repr(float(row['delta1'])), repr(float(row['rmse']))
            ])


def read_k_sweep_csv(path):
    with open(path, newline='') as fh:
        return [
            {
                'name': row['name'], 'k': int(row['k']),
                'partition': row['partition'],
                'delta1': float(row['delta1']), 'rmse': float(row['rmse'])
            }
            for row in csv.DictReader(fh)
        ]


class FigureWriter:
    """FigureWriter class

    Write figures and their CSV twins into an output directory.
    """

    def __init__(self, output_dir, logger):
        """Constructor

        :param str output_dir: Output directory
        :param Logger logger: Application logger
        """
        self.output_dir = output_dir
        self.logger = logger
        os.makedirs(output_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.output_dir, name)

    def save(self, fig, name):
        path = self.path(name)
        fig.savefig(path, bbox_inches='tight', dpi=120)
        plt.close(fig)
        self.logger.info("Wrote figure %s" % path)
        return path

    def bin_center_curves(self, curves, name='bin_centers'):
        """Bin center over bin index for a few images.

        :param dict curves: Label -> bin centers (N,)
        """
        csv_path = self.path(name + '.csv')
        write_curves_csv(csv_path, curves)
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, centers in curves.items():
            centers = np.asarray(centers, dtype=np.float64)
            ax.plot(np.arange(1, len(centers) + 1), centers, label=label)
        ax.set_xlabel("bin index")
        ax.set_ylabel("bin center [m]")
        ax.legend()
        return [self.save(fig, name + '.png'), csv_path]

    def occupancy_heatmap(self, matrix, row_edges, name, title=None):
        """Row-normalized bucket x bin occupancy.

        :param ndarray matrix: (buckets, N) occupancy, rows sum to 1 where
                               occupied
        :param list row_edges: Depth bucket edges (buckets + 1)
        """
        csv_path = self.path(name + '.csv')
        write_matrix_csv(csv_path, matrix, row_edges)
        fig, ax = plt.subplots(figsize=(7, 4))
        image = ax.imshow(
            np.asarray(matrix), aspect='auto', origin='lower', cmap='viridis',
            extent=(0.5, matrix.shape[1] + 0.5, row_edges[0], row_edges[-1])
        )
        fig.colorbar(image, ax=ax, label="frequency")
        ax.set_xlabel("bin index")
        ax.set_ylabel("ground truth depth [m]")
        if title:
            ax.set_title(title)
        return [self.save(fig, name + '.png'), csv_path]

    def per_frame_rmse(self, series, name='per_frame_rmse'):
        """RMSE per frame with indoor frames shaded; missing frames are gaps.

        :param list series: SeriesPoints
        """
        csv_path = self.path(name + '.csv')
        write_series_csv(csv_path, series)
        index = np.array([p.frame_index for p in series])
        rmse = np.array([np.nan if p.rmse is None else p.rmse for p in series])
        fig, ax = plt.subplots(figsize=(8, 3))
        for point in series:
            if point.indoor_flag:
                ax.axvspan(point.frame_index - 0.5, point.frame_index + 0.5,
                           color='0.9', linewidth=0)
        ax.plot(index, rmse, marker='.')
        ax.set_xlabel("frame")
        ax.set_ylabel("RMSE [m]")
        return [self.save(fig, name + '.png'), csv_path]

    def k_sweep(self, rows, name='k_sweep'):
        """delta1 and RMSE over K; uniform partition rows are dots.

        :param list rows: Dicts with name, k, partition, delta1, rmse
        """
        csv_path = self.path(name + '.csv')
        write_k_sweep_csv(csv_path, rows)
        fig, (ax_d, ax_r) = plt.subplots(1, 2, figsize=(9, 3.5))
        for partition, style in (('space_increasing', '-o'), ('uniform', 'o')):
            part = sorted((r for r in rows if r['partition'] == partition), key=lambda r: r['k'])
            if not part:
                continue
            ks = [r['k'] for r in part]
            ax_d.plot(ks, [r['delta1'] for r in part], style, label=partition)
            ax_r.plot(ks, [r['rmse'] for r in part], style, label=partition)
        ax_d.set_xlabel("K")
        ax_d.set_ylabel("delta1")
        ax_r.set_xlabel("K")
        ax_r.set_ylabel("RMSE [m]")
        ax_d.legend()
        return [self.save(fig, name + '.png'), csv_path]
