/** API payload shapes, mirroring the review service JSON. */

export type Verdict = 'accept' | 'reject' | 'corrected';

export interface QueueItem {
  patch_id: string;
  image_id: string;
  origin: [number, number];
  size: number;
  probability: number | null;
  flagged: boolean;
  n_detections: number;
  verdict: Verdict | null;
}

export interface QueuePage {
  items: QueueItem[];
  total: number;
  page: number;
  page_size: number;
}

export interface DetectionPoint {
  x: number;
  y: number;
  confidence: number;
}

export interface PatchDetections {
  patch_id: string;
  points: DetectionPoint[];
}

export interface ImageTotals {
  raw: number;
  reviewed: number;
}

export interface Summary {
  images: Record<string, ImageTotals>;
  total_raw: number;
  total_reviewed: number;
  flagged: number;
  decided: number;
  progress: number;
}

export interface DecisionRecord {
  id: number;
  reviewer: string;
  verdict: Verdict;
  corrected_points: string | null;
  created_at: string;
  revoked: boolean;
  on_unflagged: boolean;
}

export interface DecisionBody {
  reviewer: string;
  verdict: Verdict;
  corrected_points?: [number, number][];
}
