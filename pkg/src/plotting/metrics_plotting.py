import numpy as np
import plotly.graph_objects as go
from plotly.subplots import make_subplots

BUCKET_ORDER = ["2", "3", "4", "5", "long"]


def plot_length_breakdown(report, k=5, title=None):
    """
    Recall@K and MRR@K per session length (2 to 5, then longer sessions) as
    side-by-side bar charts.
    """
    buckets = [b for b in BUCKET_ORDER if report.buckets.get(b, {}).get("count")]
    fig = make_subplots(rows=1, cols=2, subplot_titles=(f"Recall@{k}", f"MRR@{k}"))
    for col, metric in enumerate(("recall", "mrr"), start=1):
        values = [report.buckets[b][k][metric] for b in buckets]
        counts = [report.buckets[b]["count"] for b in buckets]
        fig.add_trace(go.Bar(
            x=buckets,
            y=values,
            text=[f"n={n}" for n in counts],
            marker_color='rgba(0,176,246,0.6)',
            showlegend=False,
        ), row=1, col=col)
        fig.update_xaxes(title_text="Session length", row=1, col=col)
    fig.update_layout(
        title=title or f"{report.metadata.get('variant', 'model')} on {report.metadata.get('split', '?')}",
        template='plotly_white'
    )
    return fig


def plot_ablation_with_sem(mean_table, sem_table, metric="Recall@5", title=None):
    """Bar per variant with SEM across seeds as error bars."""
    fig = go.Figure(data=go.Bar(
        x=list(mean_table.index),
        y=mean_table[metric].to_numpy(dtype=float),
        error_y=dict(type='data', array=np.nan_to_num(sem_table[metric].to_numpy(dtype=float)), visible=True),
        marker_color='rgba(0,176,246,0.6)'
    ))
    fig.update_layout(
        title=title or f"Ablation: {metric}",
        xaxis_title='Variant',
        yaxis_title=metric,
        template='plotly_white'
    )
    return fig


def plot_training_curves(history, title="Training"):
    """Mean epoch loss (left axis) and validation MRR@20 / Recall@20 (right axis)."""
    epochs = [row["epoch"] for row in history]
    fig = make_subplots(specs=[[{"secondary_y": True}]])
    fig.add_trace(go.Scatter(x=epochs, y=[row["loss"] for row in history], mode='lines+markers',
                             name='loss'), secondary_y=False)
    for key in ("val_mrr@20", "val_recall@20"):
        values = [row.get(key) for row in history]
        if any(v is not None for v in values):
            fig.add_trace(go.Scatter(x=epochs, y=values, mode='lines+markers', name=key), secondary_y=True)
    fig.update_xaxes(title_text="Epoch")
    fig.update_yaxes(title_text="Loss", secondary_y=False)
    fig.update_yaxes(title_text="Validation metric", secondary_y=True)
    fig.update_layout(title=title, template='plotly_white')
    return fig
