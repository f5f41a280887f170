import json
import logging
import os
import sqlite3

logger = logging.getLogger(__name__)


class RunDatabase:
    def __init__(self, db_path="data/runs.db"):
        """Initialize database connection"""
        # Create data directory if it doesn't exist
        directory = os.path.dirname(db_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.db_path = db_path
        self.init_database()

    def init_database(self):
        """Initialize database tables"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute('''
                    CREATE TABLE IF NOT EXISTS run_history (
                        id INTEGER PRIMARY KEY AUTOINCREMENT,
                        experiment TEXT NOT NULL,
                        params_hash TEXT NOT NULL,
                        seed INTEGER,
                        summary TEXT NOT NULL,
                        output_dir TEXT,
                        created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                    )
                ''')
                conn.commit()
        except sqlite3.Error as e:
            logger.error("Database initialization error: %s", e)

    def store_run(self, experiment, params_hash, seed, summary, output_dir=None):
        """Record a finished run"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute('''
                    INSERT INTO run_history (experiment, params_hash, seed, summary, output_dir)
                    VALUES (?, ?, ?, ?, ?)
                ''', (experiment, params_hash, seed, json.dumps(summary, sort_keys=True),
                      str(output_dir) if output_dir else None))
                conn.commit()
                return True
        except sqlite3.Error as e:
            logger.error("Error storing run: %s", e)
            return False

    def get_run_history(self, limit=50, experiment=None):
        """Get recent runs, newest first"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                query = '''
                    SELECT experiment, params_hash, seed, summary, output_dir, created_at
                    FROM run_history
                '''
                args = []
                if experiment:
                    query += ' WHERE experiment = ?'
                    args.append(experiment)
                query += ' ORDER BY id DESC LIMIT ?'
                args.append(limit)
                cursor.execute(query, args)
                return [
                    {
                        'experiment': row[0],
                        'params_hash': row[1],
                        'seed': row[2],
                        'summary': json.loads(row[3]),
                        'output_dir': row[4],
                        'created_at': row[5],
                    }
                    for row in cursor.fetchall()
                ]
        except sqlite3.Error as e:
            logger.error("Error fetching run history: %s", e)
            return []
